//! Scenarios shipped with the binary.

use crate::config::Scenario;
use crate::LabError;

const PRESETS: &[(&str, &str)] = &[
    ("free_gaussian", include_str!("../presets/free_gaussian.toml")),
    ("harmonic", include_str!("../presets/harmonic.toml")),
    ("closeness", include_str!("../presets/closeness.toml")),
    ("closeness_harmonic", include_str!("../presets/closeness_harmonic.toml")),
    ("reverse_invader", include_str!("../presets/reverse_invader.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn source(name: &str) -> Result<&'static str, LabError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| LabError::UnknownPreset(name.to_string()))
}

pub fn load(name: &str) -> Result<Scenario, LabError> {
    Scenario::from_toml_str(source(name)?)
}

/// The leading comment block of the preset file, on one line.
pub fn summary(name: &str) -> Result<String, LabError> {
    Ok(source(name)?
        .lines()
        .map_while(|l| l.strip_prefix('#'))
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" "))
}
