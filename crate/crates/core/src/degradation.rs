//! Degradation factors, labels and severity parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng::uniform;
use crate::{Error, Result};

/// The eight atomic factors in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Rain = 0,
    Snow = 1,
    Haze = 2,
    LowLight = 3,
    OverExposure = 4,
    Blur = 5,
    Noise = 6,
    Artifact = 7,
}

pub const NUM_FACTORS: usize = 8;

/// Labels carry an extra trailing "clean" bit.
pub const NUM_LABELS: usize = NUM_FACTORS + 1;

impl Factor {
    pub const ALL: [Factor; NUM_FACTORS] = [
        Factor::Rain,
        Factor::Snow,
        Factor::Haze,
        Factor::LowLight,
        Factor::OverExposure,
        Factor::Blur,
        Factor::Noise,
        Factor::Artifact,
    ];

    /// Factors routed to the global expert group.
    pub const GLOBAL: [Factor; 3] = [Factor::Haze, Factor::LowLight, Factor::OverExposure];

    /// Factors routed to the spatial expert group.
    pub const SPATIAL: [Factor; 5] = [Factor::Rain, Factor::Snow, Factor::Blur, Factor::Noise, Factor::Artifact];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Factor> {
        Self::ALL.get(i).copied()
    }

    /// Identifier used in catalogs and directory names.
    pub fn name(self) -> &'static str {
        match self {
            Factor::Rain => "rain",
            Factor::Snow => "snow",
            Factor::Haze => "haze",
            Factor::LowLight => "low_light",
            Factor::OverExposure => "over_exposure",
            Factor::Blur => "blur",
            Factor::Noise => "noise",
            Factor::Artifact => "artifact",
        }
    }

    /// Wording used in perception prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            Factor::Rain => "rain",
            Factor::Snow => "snow",
            Factor::Haze => "haze",
            Factor::LowLight => "low-light",
            Factor::OverExposure => "over-exposure",
            Factor::Blur => "blur",
            Factor::Noise => "noise",
            Factor::Artifact => "compression artifacts",
        }
    }

    pub fn parse(s: &str) -> Option<Factor> {
        let norm: String = s.trim().to_ascii_lowercase().chars().map(|c| if c == '-' || c == ' ' { '_' } else { c }).collect();
        Self::ALL.iter().copied().find(|f| f.name() == norm).or(match norm.as_str() {
            "lowlight" | "ll" => Some(Factor::LowLight),
            "overexposure" | "oe" => Some(Factor::OverExposure),
            "jpeg" | "compression" => Some(Factor::Artifact),
            _ => None,
        })
    }
}

/// Multi-hot indicator over the eight factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DegradationVector(pub [bool; NUM_FACTORS]);

impl DegradationVector {
    pub const CLEAN: DegradationVector = DegradationVector([false; NUM_FACTORS]);

    pub fn from_factors(fs: &[Factor]) -> Self {
        let mut b = [false; NUM_FACTORS];
        for f in fs {
            b[f.index()] = true;
        }
        Self(b)
    }

    pub fn get(&self, f: Factor) -> bool {
        self.0[f.index()]
    }

    pub fn set(&mut self, f: Factor, on: bool) {
        self.0[f.index()] = on;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_clean(&self) -> bool {
        self.count() == 0
    }

    pub fn factors(&self) -> Vec<Factor> {
        Factor::ALL.iter().copied().filter(|f| self.get(*f)).collect()
    }

    /// As `0/1` reals.
    pub fn to_reals<T: crate::Real>(&self) -> [T; NUM_FACTORS] {
        let mut out = [T::zero(); NUM_FACTORS];
        for (o, b) in out.iter_mut().zip(self.0) {
            if b {
                *o = T::one();
            }
        }
        out
    }

    /// Nine-bit label: the factor bits followed by the clean bit.
    pub fn label9(&self) -> [f64; NUM_LABELS] {
        let mut out = [0.0; NUM_LABELS];
        for (o, b) in out.iter_mut().zip(self.0) {
            *o = if b { 1.0 } else { 0.0 };
        }
        out[NUM_FACTORS] = if self.is_clean() { 1.0 } else { 0.0 };
        out
    }

    /// Bit string in canonical order, e.g. `"10100000"`.
    pub fn bits(&self) -> String {
        self.0.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != NUM_FACTORS || !s.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::Invalid(format!("mask must be {NUM_FACTORS} binary digits, got {s:?}")));
        }
        let mut b = [false; NUM_FACTORS];
        for (o, c) in b.iter_mut().zip(s.chars()) {
            *o = c == '1';
        }
        Ok(Self(b))
    }
}

/// Concrete severity parameters of one factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Severity {
    /// Streak seeds per pixel, streak length in pixels, angle from vertical in degrees.
    Rain { density: f64, length: f64, angle: f64 },
    /// Flakes per pixel and mean flake radius in pixels.
    Snow { density: f64, size: f64 },
    /// Transmission and airlight.
    Haze { transmission: f64, airlight: f64 },
    LowLight { gain: f64 },
    OverExposure { gain: f64 },
    /// Gaussian kernel standard deviation in pixels.
    Blur { sigma: f64 },
    Noise { sigma: f64 },
    /// Quantization quality in `[1, 100]`.
    Artifact { quality: f64 },
}

/// Declared validity bounds of each severity parameter.
pub fn parameter_bounds(f: Factor) -> &'static [(&'static str, f64, f64)] {
    match f {
        Factor::Rain => &[("density", 0.0, 0.2), ("length", 1.0, 64.0), ("angle", -80.0, 80.0)],
        Factor::Snow => &[("density", 0.0, 0.2), ("size", 0.3, 8.0)],
        Factor::Haze => &[("transmission", 0.01, 1.0), ("airlight", 0.7, 1.0)],
        Factor::LowLight => &[("gain", 0.01, 1.0)],
        Factor::OverExposure => &[("gain", 1.0, 8.0)],
        Factor::Blur => &[("sigma", 0.0, 8.0)],
        Factor::Noise => &[("sigma", 0.0, 1.0)],
        Factor::Artifact => &[("quality", 1.0, 100.0)],
    }
}

impl Severity {
    pub fn factor(&self) -> Factor {
        match self {
            Severity::Rain { .. } => Factor::Rain,
            Severity::Snow { .. } => Factor::Snow,
            Severity::Haze { .. } => Factor::Haze,
            Severity::LowLight { .. } => Factor::LowLight,
            Severity::OverExposure { .. } => Factor::OverExposure,
            Severity::Blur { .. } => Factor::Blur,
            Severity::Noise { .. } => Factor::Noise,
            Severity::Artifact { .. } => Factor::Artifact,
        }
    }

    /// Parameter values in the order of [`parameter_bounds`].
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Severity::Rain { density, length, angle } => alloc::vec![density, length, angle],
            Severity::Snow { density, size } => alloc::vec![density, size],
            Severity::Haze { transmission, airlight } => alloc::vec![transmission, airlight],
            Severity::LowLight { gain } | Severity::OverExposure { gain } => alloc::vec![gain],
            Severity::Blur { sigma } | Severity::Noise { sigma } => alloc::vec![sigma],
            Severity::Artifact { quality } => alloc::vec![quality],
        }
    }

    pub fn from_values(f: Factor, v: &[f64]) -> Result<Self> {
        let n = parameter_bounds(f).len();
        if v.len() != n {
            return Err(Error::Severity(format!("{} expects {n} parameters, got {}", f.name(), v.len())));
        }
        let s = match f {
            Factor::Rain => Severity::Rain { density: v[0], length: v[1], angle: v[2] },
            Factor::Snow => Severity::Snow { density: v[0], size: v[1] },
            Factor::Haze => Severity::Haze { transmission: v[0], airlight: v[1] },
            Factor::LowLight => Severity::LowLight { gain: v[0] },
            Factor::OverExposure => Severity::OverExposure { gain: v[0] },
            Factor::Blur => Severity::Blur { sigma: v[0] },
            Factor::Noise => Severity::Noise { sigma: v[0] },
            Factor::Artifact => Severity::Artifact { quality: v[0] },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        for ((name, lo, hi), v) in parameter_bounds(f).iter().zip(self.values()) {
            if !(v.is_finite() && v >= *lo && v <= *hi) {
                return Err(Error::Severity(format!("{}.{name} = {v} outside [{lo}, {hi}]", f.name())));
            }
        }
        Ok(())
    }
}

/// One factor with concrete severity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub severity: Severity,
}

impl DegradationSpec {
    pub fn new(severity: Severity) -> Self {
        Self { severity }
    }

    pub fn factor(&self) -> Factor {
        self.severity.factor()
    }
}

/// Sampling interval for each parameter of one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityRange {
    pub factor: Factor,
    pub ranges: Vec<(f64, f64)>,
}

impl SeverityRange {
    pub fn new(factor: Factor, ranges: Vec<(f64, f64)>) -> Result<Self> {
        let bounds = parameter_bounds(factor);
        if ranges.len() != bounds.len() {
            return Err(Error::Catalog(format!("{} expects {} ranges, got {}", factor.name(), bounds.len(), ranges.len())));
        }
        for ((name, lo, hi), (a, b)) in bounds.iter().zip(&ranges) {
            if !(a <= b && *a >= *lo && *b <= *hi) {
                return Err(Error::Catalog(format!(
                    "{}.{name} range [{a}, {b}] not within bounds [{lo}, {hi}]",
                    factor.name()
                )));
            }
        }
        Ok(Self { factor, ranges })
    }

    /// Built-in sampling ranges.
    pub fn default_for(f: Factor) -> Self {
        let ranges = match f {
            Factor::Rain => alloc::vec![(0.004, 0.012), (6.0, 14.0), (-25.0, 25.0)],
            Factor::Snow => alloc::vec![(0.004, 0.012), (0.6, 1.6)],
            Factor::Haze => alloc::vec![(0.45, 0.8), (0.7, 1.0)],
            Factor::LowLight => alloc::vec![(0.25, 0.55)],
            Factor::OverExposure => alloc::vec![(1.5, 2.5)],
            Factor::Blur => alloc::vec![(0.8, 2.0)],
            Factor::Noise => alloc::vec![(0.03, 0.1)],
            Factor::Artifact => alloc::vec![(10.0, 40.0)],
        };
        Self { factor: f, ranges }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradationSpec {
        let v: Vec<f64> = self.ranges.iter().map(|(a, b)| uniform(rng, *a, *b)).collect();
        DegradationSpec::new(Severity::from_values(self.factor, &v).expect("ranges validated against bounds"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Clean,
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Clean => "clean",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clean" => Some(Split::Clean),
            "seen" => Some(Split::Seen),
            "unseen" => Some(Split::Unseen),
            _ => None,
        }
    }
}

/// One degradation configuration of the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    /// Sampling ranges for each active factor, in canonical order.
    pub specs: Vec<SeverityRange>,
    pub label: DegradationVector,
    pub split: Split,
    pub order: usize,
}

impl TaskConfig {
    /// Builds a config, sorting factors canonically and deriving label and order.
    pub fn new(name: impl Into<String>, mut specs: Vec<SeverityRange>, split: Split) -> Result<Self> {
        let name = name.into();
        specs.sort_by_key(|s| s.factor);
        for w in specs.windows(2) {
            if w[0].factor == w[1].factor {
                return Err(Error::Catalog(format!("config {name} repeats factor {}", w[0].factor.name())));
            }
        }
        if specs.len() > 4 {
            return Err(Error::Catalog(format!("config {name} has {} factors (max 4)", specs.len())));
        }
        let factors: Vec<Factor> = specs.iter().map(|s| s.factor).collect();
        let label = DegradationVector::from_factors(&factors);
        let order = specs.len();
        let t = Self { name, specs, label, split, order };
        t.check()?;
        Ok(t)
    }

    pub fn factors(&self) -> Vec<Factor> {
        self.specs.iter().map(|s| s.factor).collect()
    }

    /// Verifies label, order and split consistency.
    pub fn check(&self) -> Result<()> {
        let from_specs = DegradationVector::from_factors(&self.factors());
        if from_specs != self.label {
            return Err(Error::Catalog(format!("config {}: label does not match its factors", self.name)));
        }
        if self.order != self.specs.len() {
            return Err(Error::Catalog(format!("config {}: order {} but {} factors", self.name, self.order, self.specs.len())));
        }
        match (self.split, self.order) {
            (Split::Clean, 0) => {}
            (Split::Clean, _) | (_, 0) => {
                return Err(Error::Catalog(format!("config {}: only the clean config may have order 0", self.name)))
            }
            _ => {}
        }
        if self.label.get(Factor::LowLight) && self.label.get(Factor::OverExposure) {
            return Err(Error::Catalog(format!("config {}: low-light and over-exposure together", self.name)));
        }
        Ok(())
    }

    /// Draws concrete severities for every factor.
    pub fn sample_specs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DegradationSpec> {
        self.specs.iter().map(|s| s.sample(rng)).collect()
    }
}
