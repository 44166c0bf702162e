//! Scenario files: the parameterization of a simulated accelerator.
//!
//! A scenario file is TOML with one `[[device]]` block per simulated device.
//! The schema is documented in `book/src/simulator.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceSpec, FrequencyMHz, FrequencyPair};

/// Scenario files shipped with the crate, addressable by name from the CLI.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] =
    &[("a100_like", include_str!("../../scenarios/a100_like.toml"))];

pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario has no device with index {0}")]
    NoSuchDevice(u32),
}

/// One component of a latency mixture; nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyComponent {
    pub weight: f64,
    pub mean: f64,
    #[serde(default)]
    pub sigma: f64,
    /// Overrides the scenario's `transition_ramp` for switches drawn from this component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<u64>,
}

impl LatencyComponent {
    pub fn fixed(mean_ns: f64) -> Self {
        LatencyComponent {
            weight: 1.0,
            mean: mean_ns,
            sigma: 0.0,
            ramp: None,
        }
    }

    pub fn normal(weight: f64, mean_ns: f64, sigma_ns: f64) -> Self {
        LatencyComponent {
            weight,
            mean: mean_ns,
            sigma: sigma_ns,
            ramp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub init: FrequencyMHz,
    pub target: FrequencyMHz,
    pub components: Vec<LatencyComponent>,
}

/// A commanded frequency that actually executes at another speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputAlias {
    pub frequency: FrequencyMHz,
    pub runs_at: FrequencyMHz,
}

fn default_outlier_scale() -> f64 {
    10.0
}
fn default_link_delay() -> u64 {
    2_000
}
fn default_idle_timeout() -> u64 {
    50_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub spec: DeviceSpec,
    pub work_cycles_per_iteration: u64,
    #[serde(default)]
    pub noise_rel_sigma: f64,
    /// Nanoseconds a cold device runs at idle frequency after a kernel starts.
    #[serde(default)]
    pub wakeup_latency: u64,
    #[serde(default)]
    pub switch_latency_table: Vec<LatencyEntry>,
    /// Mixture for pairs missing from the table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_switch_latency: Option<Vec<LatencyComponent>>,
    /// Nanoseconds over which the effective frequency moves linearly once the latency elapses.
    #[serde(default)]
    pub transition_ramp: u64,
    #[serde(default)]
    pub outlier_probability: f64,
    #[serde(default = "default_outlier_scale")]
    pub outlier_scale: f64,
    #[serde(default)]
    pub thermal_throttle_probability: f64,
    #[serde(default)]
    pub power_throttle_pairs: Vec<FrequencyPair>,
    #[serde(default)]
    pub rng_seed: u64,

    /// True device-minus-host clock offset, nanoseconds.
    #[serde(default)]
    pub clock_offset: i64,
    /// One-way host/device link delay, nanoseconds.
    #[serde(default = "default_link_delay")]
    pub link_delay: u64,
    /// Uniform extra delay in `[0, link_jitter]` added to each link direction.
    #[serde(default)]
    pub link_jitter: u64,
    /// A kernel starting longer than this after the previous one ended starts cold.
    #[serde(default = "default_idle_timeout")]
    pub idle_timeout: u64,
    /// Extra switching latency per core, nanoseconds; empty means none.
    #[serde(default)]
    pub core_latency_offsets: Vec<u64>,
    #[serde(default)]
    pub throughput_aliases: Vec<ThroughputAlias>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub device: Vec<SimScenario>,
}

impl ScenarioFile {
    pub fn select(&self, device_index: u32) -> Result<SimScenario, ScenarioError> {
        self.device
            .iter()
            .find(|d| d.spec.index == device_index)
            .cloned()
            .ok_or(ScenarioError::NoSuchDevice(device_index))
    }
}

pub fn parse_scenario_file(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let mut file: ScenarioFile =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    if file.device.is_empty() {
        return Err(ScenarioError::Invalid("no [[device]] blocks".into()));
    }
    for d in &mut file.device {
        d.normalize();
        d.validate()?;
    }
    Ok(file)
}

/// Loads a scenario by bundled name or file path and selects a device block.
pub fn load_scenario(source: &str, device_index: u32) -> Result<SimScenario, ScenarioError> {
    let text = match bundled_scenario(source) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(Path::new(source)).map_err(|e| ScenarioError::Io {
            path: source.to_string(),
            source: e,
        })?,
    };
    parse_scenario_file(&text)?.select(device_index)
}

impl SimScenario {
    /// A single-device scenario with zero noise, step transitions and the
    /// given latency for every pair.
    pub fn uniform(
        frequencies: &[u32],
        core_count: u32,
        work_cycles_per_iteration: u64,
        latency_ns: f64,
    ) -> Self {
        let mut freqs: Vec<FrequencyMHz> = frequencies.iter().copied().map(FrequencyMHz).collect();
        freqs.sort();
        freqs.dedup();
        SimScenario {
            spec: DeviceSpec {
                name: "sim".into(),
                index: 0,
                core_count,
                idle_frequency: freqs[0],
                supported_frequencies: freqs,
                timer_resolution: 1_000,
            },
            work_cycles_per_iteration,
            noise_rel_sigma: 0.0,
            wakeup_latency: 0,
            switch_latency_table: Vec::new(),
            default_switch_latency: Some(vec![LatencyComponent::fixed(latency_ns)]),
            transition_ramp: 0,
            outlier_probability: 0.0,
            outlier_scale: default_outlier_scale(),
            thermal_throttle_probability: 0.0,
            power_throttle_pairs: Vec::new(),
            rng_seed: 0,
            clock_offset: 0,
            link_delay: default_link_delay(),
            link_jitter: 0,
            idle_timeout: default_idle_timeout(),
            core_latency_offsets: Vec::new(),
            throughput_aliases: Vec::new(),
        }
    }

    /// Sets (or replaces) the mixture for one directed pair.
    pub fn with_latency(mut self, init: u32, target: u32, components: Vec<LatencyComponent>) -> Self {
        let pair = FrequencyPair::new(init, target);
        self.switch_latency_table
            .retain(|e| FrequencyPair { init: e.init, target: e.target } != pair);
        self.switch_latency_table.push(LatencyEntry {
            init: pair.init,
            target: pair.target,
            components,
        });
        self
    }

    pub fn latency_mixture(&self, pair: FrequencyPair) -> Option<&[LatencyComponent]> {
        self.switch_latency_table
            .iter()
            .find(|e| e.init == pair.init && e.target == pair.target)
            .map(|e| e.components.as_slice())
            .or(self.default_switch_latency.as_deref())
    }

    /// Speed (MHz) the device actually executes at when `f` is commanded.
    pub fn speed_of(&self, f: FrequencyMHz) -> f64 {
        self.throughput_aliases
            .iter()
            .find(|a| a.frequency == f)
            .map_or(f.0, |a| a.runs_at.0) as f64
    }

    /// Zero-noise iteration duration at `f`, nanoseconds.
    pub fn nominal_iteration_ns(&self, f: FrequencyMHz) -> f64 {
        self.work_cycles_per_iteration as f64 * 1e3 / self.speed_of(f)
    }

    pub(crate) fn normalize(&mut self) {
        self.spec.supported_frequencies.sort();
        self.spec.supported_frequencies.dedup();
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(format!("{}: {m}", self.spec.name)));
        let spec = &self.spec;
        if spec.core_count == 0 {
            return bad("core_count must be positive".into());
        }
        if spec.supported_frequencies.is_empty() || spec.supported_frequencies.iter().any(|f| f.0 == 0) {
            return bad("supported_frequencies must be non-empty and positive".into());
        }
        if !spec.supports(spec.idle_frequency) {
            return bad(format!("idle_frequency {} not supported", spec.idle_frequency));
        }
        if spec.timer_resolution == 0 {
            return bad("timer_resolution must be positive".into());
        }
        if self.work_cycles_per_iteration == 0 {
            return bad("work_cycles_per_iteration must be positive".into());
        }
        if !(self.noise_rel_sigma >= 0.0) {
            return bad("noise_rel_sigma must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.outlier_probability) {
            return bad("outlier_probability must be in [0, 1)".into());
        }
        if !(self.outlier_scale > 1.0) {
            return bad("outlier_scale must be > 1".into());
        }
        if !(0.0..=1.0).contains(&self.thermal_throttle_probability) {
            return bad("thermal_throttle_probability must be in [0, 1]".into());
        }
        if !self.core_latency_offsets.is_empty()
            && self.core_latency_offsets.len() != spec.core_count as usize
        {
            return bad("core_latency_offsets must be empty or have core_count entries".into());
        }
        for a in &self.throughput_aliases {
            if !spec.supports(a.frequency) || a.runs_at.0 == 0 {
                return bad(format!("throughput alias for {} is invalid", a.frequency));
            }
        }
        let mixtures = self
            .switch_latency_table
            .iter()
            .map(|e| e.components.as_slice())
            .chain(self.default_switch_latency.as_deref());
        for m in mixtures {
            if m.is_empty() {
                return bad("latency mixture has no components".into());
            }
            let total: f64 = m.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 || m.iter().any(|c| c.weight < 0.0) {
                return bad(format!("mixture weights sum to {total}, expected 1"));
            }
            if m.iter().any(|c| !(c.sigma >= 0.0) || !(c.mean >= 0.0)) {
                return bad("latency means and sigmas must be >= 0".into());
            }
        }
        for e in &self.switch_latency_table {
            if !spec.supports(e.init) || !spec.supports(e.target) || e.init == e.target {
                return bad(format!("latency entry {}->{} is invalid", e.init.0, e.target.0));
            }
        }
        for &a in &spec.supported_frequencies {
            for &b in &spec.supported_frequencies {
                if a != b && self.latency_mixture(FrequencyPair { init: a, target: b }).is_none() {
                    return bad(format!(
                        "no switch latency for {}->{} and no default_switch_latency",
                        a.0, b.0
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_parses() {
        let file = parse_scenario_file(bundled_scenario("a100_like").unwrap()).unwrap();
        assert!(file.device.len() >= 2);
        let d0 = file.select(0).unwrap();
        assert!(d0.spec.supports(FrequencyMHz(1350)));
        assert!(d0.spec.supports(FrequencyMHz(1260)));
        assert!(d0.spec.supports(FrequencyMHz(795)));
        assert!(matches!(file.select(9), Err(ScenarioError::NoSuchDevice(9))));
    }

    #[test]
    fn serialized_scenario_round_trips() {
        let s = SimScenario::uniform(&[1000, 2000], 2, 50_000, 1e6).with_latency(
            1000,
            2000,
            vec![LatencyComponent::normal(0.5, 1e6, 1e3), LatencyComponent::normal(0.5, 2e6, 1e3)],
        );
        let text = toml::to_string(&ScenarioFile { device: vec![s.clone()] }).unwrap();
        let back = parse_scenario_file(&text).unwrap();
        assert_eq!(back.device[0], s);
    }

    #[test]
    fn missing_latency_coverage_is_rejected() {
        let mut s = SimScenario::uniform(&[1000, 2000], 1, 1000, 1e6);
        s.default_switch_latency = None;
        s = s.with_latency(1000, 2000, vec![LatencyComponent::fixed(1.0)]);
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let s = SimScenario::uniform(&[1000, 2000], 1, 1000, 1e6)
            .with_latency(1000, 2000, vec![LatencyComponent::normal(0.7, 1.0, 0.0)]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn aliases_change_speed() {
        let mut s = SimScenario::uniform(&[1000, 1010], 1, 50_000, 0.0);
        s.throughput_aliases.push(ThroughputAlias {
            frequency: FrequencyMHz(1010),
            runs_at: FrequencyMHz(1000),
        });
        assert_eq!(s.nominal_iteration_ns(FrequencyMHz(1010)), 50_000.0);
    }
}
