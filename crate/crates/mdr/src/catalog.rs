//! Catalog files: the list of degradation configurations as TOML.

use std::collections::BTreeMap;
use std::path::Path;

use mdr_core::catalog::{Catalog, OrderCounts};
use mdr_core::degradation::{parameter_bounds, DegradationVector, Factor, SeverityRange, Split, TaskConfig};
use serde::Deserialize;

use crate::error::{read_string, Error, Result};
use crate::hash::sha256_hex;

/// The catalog shipped with the crate.
pub const DEFAULT_CATALOG: &str = include_str!("../assets/catalog.toml");

type RangeTable = BTreeMap<String, BTreeMap<String, [f64; 2]>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    version: u32,
    declared: Option<Declared>,
    #[serde(default)]
    severity: RangeTable,
    #[serde(rename = "config")]
    configs: Vec<ConfigEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Declared {
    seen: [usize; 5],
    unseen: [usize; 5],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEntry {
    name: String,
    split: String,
    factors: Vec<String>,
    label: Option<String>,
    #[serde(default)]
    severity: RangeTable,
}

/// A validated catalog with the digest of its source text.
#[derive(Clone, Debug)]
pub struct LoadedCatalog {
    pub catalog: Catalog,
    pub text: String,
    pub sha256: String,
    pub declared_seen: Option<OrderCounts>,
    pub declared_unseen: Option<OrderCounts>,
}

fn ranges_for(f: Factor, table: &BTreeMap<String, [f64; 2]>, ctx: &str) -> Result<SeverityRange> {
    let bounds = parameter_bounds(f);
    for key in table.keys() {
        if !bounds.iter().any(|(n, _, _)| n == key) {
            return Err(Error::Invalid(format!("{ctx}: unknown {} parameter {key:?}", f.name())));
        }
    }
    let mut ranges = Vec::with_capacity(bounds.len());
    for (name, _, _) in bounds {
        let r = table
            .get(*name)
            .ok_or_else(|| Error::Invalid(format!("{ctx}: missing range for {}.{name}", f.name())))?;
        ranges.push((r[0], r[1]));
    }
    Ok(SeverityRange::new(f, ranges)?)
}

fn parse_factor(name: &str, ctx: &str) -> Result<Factor> {
    Factor::parse(name).ok_or_else(|| Error::Invalid(format!("{ctx}: unknown factor {name:?}")))
}

/// Parses and validates catalog text.
pub fn parse_catalog(text: &str) -> Result<LoadedCatalog> {
    let file: CatalogFile = toml::from_str(text)?;
    if file.version != 1 {
        return Err(Error::Invalid(format!("unsupported catalog version {}", file.version)));
    }
    let mut defaults = BTreeMap::new();
    for (name, table) in &file.severity {
        let f = parse_factor(name, "[severity]")?;
        defaults.insert(f, ranges_for(f, table, "[severity]")?);
    }
    let mut configs = Vec::with_capacity(file.configs.len());
    for entry in &file.configs {
        let ctx = format!("config {:?}", entry.name);
        let split = Split::parse(&entry.split).ok_or_else(|| Error::Invalid(format!("{ctx}: unknown split {:?}", entry.split)))?;
        let mut specs = Vec::new();
        for name in &entry.factors {
            let f = parse_factor(name, &ctx)?;
            let r = match entry.severity.get(name) {
                Some(t) => ranges_for(f, t, &ctx)?,
                None => defaults.get(&f).cloned().unwrap_or_else(|| SeverityRange::default_for(f)),
            };
            specs.push(r);
        }
        for key in entry.severity.keys() {
            if !entry.factors.contains(key) {
                return Err(Error::Invalid(format!("{ctx}: severity given for absent factor {key:?}")));
            }
        }
        let cfg = TaskConfig::new(entry.name.clone(), specs, split)?;
        if let Some(bits) = &entry.label {
            let label = DegradationVector::parse_bits(bits)?;
            if label != cfg.label {
                return Err(Error::Invalid(format!("{ctx}: label {bits} does not match factors ({})", cfg.label.bits())));
            }
        }
        configs.push(cfg);
    }
    let catalog = Catalog::new(configs)?;
    let declared_seen = file.declared.as_ref().map(|d| OrderCounts(d.seen));
    let declared_unseen = file.declared.as_ref().map(|d| OrderCounts(d.unseen));
    if let Some(d) = declared_seen {
        catalog.check_declared(Split::Seen, d)?;
    }
    if let Some(d) = declared_unseen {
        catalog.check_declared(Split::Unseen, d)?;
    }
    Ok(LoadedCatalog { catalog, text: text.to_string(), sha256: sha256_hex(text.as_bytes()), declared_seen, declared_unseen })
}

/// Loads `path`, or the shipped catalog when `None`.
pub fn load_catalog(path: Option<&Path>) -> Result<LoadedCatalog> {
    match path {
        Some(p) => parse_catalog(&read_string(p)?),
        None => parse_catalog(DEFAULT_CATALOG),
    }
}
