//! Energy, emissions and communication accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Paris-region grid intensity, g CO2e per kWh.
pub const DEFAULT_EMISSION_FACTOR: f64 = 56.0;

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(FedError::Domain(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

/// Energy in Wh drawn at `power_w` for `duration_s` seconds.
pub fn meter_energy(power_w: f64, duration_s: f64) -> Result<f64> {
    non_negative("power_w", power_w)?;
    non_negative("duration_s", duration_s)?;
    Ok(power_w * duration_s / 3600.0)
}

/// Grams CO2e for `energy_wh` at `factor_g_per_kwh`.
pub fn to_co2e(energy_wh: f64, factor_g_per_kwh: f64) -> Result<f64> {
    non_negative("energy_wh", energy_wh)?;
    non_negative("emission factor", factor_g_per_kwh)?;
    Ok(energy_wh * factor_g_per_kwh / 1000.0)
}

/// Round to one decimal, the precision used in report tables.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Manufacturing emissions of the hardware and its service lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbodiedProfile {
    pub manufacturing_gco2e: f64,
    pub lifetime_hours: f64,
}

impl Default for EmbodiedProfile {
    /// Roughly one accelerator-class server share over four years.
    fn default() -> Self {
        Self {
            manufacturing_gco2e: 150_000.0,
            lifetime_hours: 35_040.0,
        }
    }
}

/// Linear time-based amortization of manufacturing emissions, capped at the
/// full manufacturing footprint.
pub fn embodied_amortized(profile: &EmbodiedProfile, usage_hours: f64) -> Result<f64> {
    if !(profile.lifetime_hours > 0.0 && profile.lifetime_hours.is_finite()) {
        return Err(FedError::Domain(format!(
            "lifetime_hours must be > 0, got {}",
            profile.lifetime_hours
        )));
    }
    non_negative("manufacturing_gco2e", profile.manufacturing_gco2e)?;
    non_negative("usage_hours", usage_hours)?;
    Ok((usage_hours / profile.lifetime_hours).min(1.0) * profile.manufacturing_gco2e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: String,
    pub client_id: Option<usize>,
    pub energy_wh: f64,
    pub duration_s: f64,
    pub bytes: u64,
}

/// Append-only record of energy, time and bytes per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    entries: Vec<LedgerEntry>,
    emission_factor: f64,
    total_wh: f64,
    total_duration_s: f64,
    total_bytes: u64,
}

impl Default for EnergyLedger {
    fn default() -> Self {
        Self::new(DEFAULT_EMISSION_FACTOR).expect("default factor is valid")
    }
}

impl EnergyLedger {
    pub fn new(emission_factor: f64) -> Result<Self> {
        non_negative("emission factor", emission_factor)?;
        Ok(Self {
            entries: Vec::new(),
            emission_factor,
            total_wh: 0.0,
            total_duration_s: 0.0,
            total_bytes: 0,
        })
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn emission_factor(&self) -> f64 {
        self.emission_factor
    }

    pub fn total_wh(&self) -> f64 {
        self.total_wh
    }

    pub fn total_duration_s(&self) -> f64 {
        self.total_duration_s
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    /// Meter `power_w` over `duration_s` and append the entry. Returns the
    /// charged energy in Wh.
    pub fn charge(
        &mut self,
        phase: &str,
        client_id: Option<usize>,
        power_w: f64,
        duration_s: f64,
        bytes: u64,
    ) -> Result<f64> {
        let energy_wh = meter_energy(power_w, duration_s)?;
        self.entries.push(LedgerEntry {
            phase: phase.to_string(),
            client_id,
            energy_wh,
            duration_s,
            bytes,
        });
        self.total_wh += energy_wh;
        self.total_duration_s += duration_s;
        self.total_bytes += bytes;
        Ok(energy_wh)
    }

    /// Appends all entries of `other`, in order. Used to merge per-client
    /// buffers at a round barrier.
    pub fn absorb(&mut self, other: &EnergyLedger) {
        for e in &other.entries {
            self.total_wh += e.energy_wh;
            self.total_duration_s += e.duration_s;
            self.total_bytes += e.bytes;
            self.entries.push(e.clone());
        }
    }

    pub fn report(
        &self,
        embodied: Option<&EmbodiedProfile>,
        usage_hours: f64,
    ) -> Result<GreenReport> {
        let mut phases: BTreeMap<String, PhaseTotals> = BTreeMap::new();
        for e in &self.entries {
            let p = phases.entry(e.phase.clone()).or_default();
            p.energy_wh += e.energy_wh;
            p.duration_s += e.duration_s;
            p.bytes += e.bytes;
        }
        let mut total_wh = 0.0;
        let mut total_duration_s = 0.0;
        let mut total_bytes = 0;
        for p in phases.values_mut() {
            p.gco2e = to_co2e(p.energy_wh, self.emission_factor)?;
            total_wh += p.energy_wh;
            total_duration_s += p.duration_s;
            total_bytes += p.bytes;
        }
        let runtime_gco2e = to_co2e(total_wh, self.emission_factor)?;
        let embodied_gco2e = match embodied {
            Some(profile) => embodied_amortized(profile, usage_hours)?,
            None => 0.0,
        };
        Ok(GreenReport {
            emission_factor: self.emission_factor,
            phases,
            total_wh,
            total_duration_s,
            runtime_gco2e,
            embodied_gco2e,
            total_gco2e: runtime_gco2e + embodied_gco2e,
            total_bytes,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub energy_wh: f64,
    pub duration_s: f64,
    pub gco2e: f64,
    pub bytes: u64,
}

/// Totals in full precision; [`GreenReport::table`] rounds for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub emission_factor: f64,
    pub phases: BTreeMap<String, PhaseTotals>,
    pub total_wh: f64,
    pub total_duration_s: f64,
    pub runtime_gco2e: f64,
    pub embodied_gco2e: f64,
    pub total_gco2e: f64,
    pub total_bytes: u64,
}

impl GreenReport {
    /// Fixed-width text table: Energy (Wh), CO2e (g), Duration (s), bytes.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>10} {:>14} {:>14}",
            "Phase", "Energy (Wh)", "CO2e (g)", "Duration (s)", "bytes"
        );
        for (name, p) in &self.phases {
            let _ = writeln!(
                out,
                "{:<16} {:>12.1} {:>10.1} {:>14.1} {:>14}",
                name, p.energy_wh, p.gco2e, p.duration_s, p.bytes
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>12.1} {:>10.1} {:>14.1} {:>14}",
            "runtime", self.total_wh, self.runtime_gco2e, self.total_duration_s, self.total_bytes
        );
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>10.1} {:>14} {:>14}",
            "embodied", "-", self.embodied_gco2e, "-", "-"
        );
        let _ = writeln!(
            out,
            "{:<16} {:>12.1} {:>10.1} {:>14.1} {:>14}",
            "total", self.total_wh, self.total_gco2e, self.total_duration_s, self.total_bytes
        );
        let _ = writeln!(out, "emission factor: {} gCO2e/kWh", self.emission_factor);
        out
    }
}
