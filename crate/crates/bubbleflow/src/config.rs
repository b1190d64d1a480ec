//! Run configuration: schema, defaults, validation and hashing. Every run
//! writes the fully resolved configuration next to its outputs.

use crate::error::BubbleflowError;
use crate::metric::{ConstantProfile, ProfileMode};
use crate::torus::TorusSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusConfig {
    pub side: f64,
    pub grid_n: usize,
}

impl Default for TorusConfig {
    fn default() -> Self {
        TorusConfig {
            side: 2.0,
            grid_n: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub mode: ProfileMode,
    /// ramp-window width and core margin in log-radius units; `None` takes
    /// the mode defaults
    pub psi_gap_a: Option<f64>,
    pub psi_gap_b: Option<f64>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            mode: ProfileMode::Desk,
            psi_gap_a: None,
            psi_gap_b: None,
        }
    }
}

impl ProfileConfig {
    pub fn build(&self, spec: &TorusSpec) -> Result<ConstantProfile, BubbleflowError> {
        match (self.mode, self.psi_gap_a, self.psi_gap_b) {
            (ProfileMode::Paper, None, None) => Ok(ConstantProfile::paper(spec)),
            (ProfileMode::Desk, None, None) => Ok(ConstantProfile::desk(spec)),
            (mode, a, b) => {
                let base = match mode {
                    ProfileMode::Paper => ConstantProfile::paper(spec),
                    ProfileMode::Desk => ConstantProfile::desk(spec),
                };
                ConstantProfile::with_gaps(
                    spec,
                    mode,
                    a.unwrap_or(base.psi_gap_a),
                    b.unwrap_or(base.psi_gap_b),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDataConfig {
    CutoffBubble {
        lambda: f64,
        b: [f64; 2],
        cut_radius: f64,
    },
    BubbleModel {
        lambda: f64,
        a: [f64; 2],
    },
    File {
        path: String,
    },
}

impl Default for InitialDataConfig {
    fn default() -> Self {
        InitialDataConfig::CutoffBubble {
            lambda: 64.0,
            b: [1.0, 1.0],
            cut_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// stop the coupled phase once mu exceeds this multiple of the initial scale
    pub mu_stop_factor: f64,
    /// gradient tolerance as a multiple of sqrt(defect)
    pub grad_tol_rel: f64,
    /// absolute floor for the gradient tolerance
    pub grad_tol_floor: f64,
    pub t_max: f64,
    pub cfl: f64,
    pub max_steps: usize,
    /// half-width of the protected core-energy window
    pub eps2: f64,
    /// polish the initial scale against the resolved pulled-back core
    pub refine_scale: bool,
    pub max_defect: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            mu_stop_factor: (0.5f64).exp(),
            grad_tol_rel: 8.0,
            grad_tol_floor: 1e-4,
            t_max: 10.0,
            cfl: 0.2,
            max_steps: 40_000,
            eps2: 0.1,
            refine_scale: true,
            max_defect: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditCapsConfig {
    pub eps2: f64,
    pub energy_cap: f64,
    pub scale_cap: f64,
    pub dist_cap: f64,
}

impl Default for AuditCapsConfig {
    fn default() -> Self {
        AuditCapsConfig {
            eps2: 0.1,
            energy_cap: 100.0,
            scale_cap: 10.0,
            dist_cap: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeTolerances {
    pub dist: f64,
    pub inv_mu0: f64,
    pub inv_lambda: f64,
    pub bubble_defect: f64,
    pub bubble_far_field: f64,
}

impl Default for SlopeTolerances {
    fn default() -> Self {
        SlopeTolerances {
            dist: 0.15,
            inv_mu0: 0.15,
            inv_lambda: 0.15,
            bubble_defect: 0.2,
            bubble_far_field: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub torus: TorusConfig,
    pub profile: ProfileConfig,
    pub initial_data: InitialDataConfig,
    pub flow: FlowConfig,
    pub audit_caps: AuditCapsConfig,
    pub sweep_lambdas: Vec<f64>,
    pub slope_tolerances: SlopeTolerances,
    pub out_dir: String,
    pub seed: u64,
    /// 0 = use all available cores
    pub threads: usize,
    pub greens_modes: usize,
    /// smallest trusted bubble scale for the model generators
    pub lambda_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            torus: TorusConfig::default(),
            profile: ProfileConfig::default(),
            initial_data: InitialDataConfig::default(),
            flow: FlowConfig::default(),
            audit_caps: AuditCapsConfig::default(),
            sweep_lambdas: vec![32.0, 64.0, 128.0],
            slope_tolerances: SlopeTolerances::default(),
            out_dir: "out".into(),
            seed: 20_240_817,
            threads: 0,
            greens_modes: 64,
            lambda_floor: 16.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, BubbleflowError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| BubbleflowError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BubbleflowError> {
        let spec = self.torus_spec()?;
        self.profile.build(&spec)?;
        if !(self.flow.cfl > 0.0 && self.flow.cfl <= 0.25) {
            return Err(BubbleflowError::Config(
                "cfl must lie in (0, 0.25] for the explicit scheme".into(),
            ));
        }
        if self.flow.eps2 <= 0.0 || self.flow.eps2 >= 1.0 {
            return Err(BubbleflowError::Config("eps2 must lie in (0, 1)".into()));
        }
        if self.greens_modes < 32 {
            return Err(BubbleflowError::Config(
                "greens_modes must be at least 32".into(),
            ));
        }
        match &self.initial_data {
            InitialDataConfig::CutoffBubble { lambda, cut_radius, .. } => {
                if lambda * cut_radius < 8.0 {
                    return Err(BubbleflowError::Config(
                        "lambda * cut_radius must be at least 8".into(),
                    ));
                }
            }
            InitialDataConfig::BubbleModel { lambda, .. } => {
                if *lambda < 2.0 * self.lambda_floor {
                    return Err(BubbleflowError::Config(
                        "bubble model scale below twice the configured floor".into(),
                    ));
                }
            }
            InitialDataConfig::File { .. } => {}
        }
        Ok(())
    }

    pub fn torus_spec(&self) -> Result<TorusSpec, BubbleflowError> {
        TorusSpec::new(self.torus.side, self.torus.grid_n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the resolved configuration. The output directory is
    /// excluded: it routes artifacts without changing what is computed.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = String::new();
        let mut hasher = Sha256::new();
        hasher.update(canonical.to_json().as_bytes());
        let digest = hasher.finalize();
        let mut s = String::with_capacity(16);
        for b in digest.iter().take(8) {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Provenance string embedded into every output file.
    pub fn provenance(&self) -> String {
        format!(
            "bubbleflow v{} config {} seed {} threads {}",
            env!("CARGO_PKG_VERSION"),
            self.hash(),
            self.seed,
            self.threads
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hashes_stably() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let h1 = cfg.hash();
        let h2 = RunConfig::default().hash();
        assert_eq!(h1, h2);
        let mut other = RunConfig::default();
        other.seed += 1;
        assert_ne!(h1, other.hash());
    }

    #[test]
    fn config_roundtrip_through_json() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut cfg = RunConfig::default();
        cfg.flow.cfl = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.initial_data = InitialDataConfig::CutoffBubble {
            lambda: 10.0,
            b: [1.0, 1.0],
            cut_radius: 0.5,
        };
        assert!(cfg.validate().is_err());
    }
}
