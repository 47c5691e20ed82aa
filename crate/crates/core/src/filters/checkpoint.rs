use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FilterConfig, Layer, LqpParams, Mlp, MlpPolicy};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub system: String,
    pub seed: u64,
    pub git_rev: String,
    /// Training hyperparameters, echoed verbatim.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// Learned QP filter on disk; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqpCheckpoint {
    pub n_qp: usize,
    pub m_qp: usize,
    pub n_sys: usize,
    pub m_sys: usize,
    #[serde(rename = "H", with = "linalg::rows")]
    pub h: DMatrix<f64>,
    #[serde(rename = "W_b", with = "linalg::rows")]
    pub w_b: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    pub b_b: DVector<f64>,
    #[serde(with = "linalg::vector")]
    pub log_std: DVector<f64>,
    pub n_iter: usize,
    pub alpha: f64,
    pub eps: f64,
    pub metadata: CheckpointMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub n_sys: usize,
    pub m_sys: usize,
    pub layers: Vec<Layer>,
    #[serde(with = "linalg::vector")]
    pub log_std: DVector<f64>,
    pub metadata: CheckpointMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Checkpoint {
    Lqp(LqpCheckpoint),
    Mlp(MlpCheckpoint),
}

impl LqpCheckpoint {
    pub fn new(params: &LqpParams, cfg: &FilterConfig, metadata: CheckpointMetadata) -> Self {
        Self {
            n_qp: params.n_qp(),
            m_qp: params.m_qp(),
            n_sys: params.n_sys(),
            m_sys: params.m_sys(),
            h: params.h.clone(),
            w_b: params.w_b.clone(),
            b_b: params.b_b.clone(),
            log_std: params.log_std.clone(),
            n_iter: cfg.n_iter,
            alpha: cfg.alpha,
            eps: cfg.eps,
            metadata,
        }
    }

    pub fn params(&self) -> Result<LqpParams> {
        check_dim("H rows", self.m_qp, self.h.nrows())?;
        check_dim("H columns", self.n_qp, self.h.ncols())?;
        check_dim("W_b columns", self.n_sys, self.w_b.ncols())?;
        check_dim("log_std", self.m_sys, self.log_std.len())?;
        LqpParams::new(self.h.clone(), self.w_b.clone(), self.b_b.clone(), self.log_std.clone())
    }

    /// Filter settings stored with the parameters, other fields at defaults.
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_iter: self.n_iter,
            alpha: self.alpha,
            eps: self.eps,
            ..FilterConfig::default()
        }
    }
}

impl MlpCheckpoint {
    pub fn new(policy: &MlpPolicy, metadata: CheckpointMetadata) -> Self {
        Self {
            n_sys: policy.n_sys(),
            m_sys: policy.m_sys(),
            layers: policy.net.layers.clone(),
            log_std: policy.log_std.clone(),
            metadata,
        }
    }

    pub fn policy(&self) -> Result<MlpPolicy> {
        let net = Mlp::new(self.layers.clone())?;
        check_dim("network input", self.n_sys + self.m_sys, net.input_width())?;
        check_dim("network output", self.m_sys, net.output_width())?;
        check_dim("log_std", self.m_sys, self.log_std.len())?;
        Ok(MlpPolicy {
            net,
            log_std: self.log_std.clone(),
        })
    }
}

impl Checkpoint {
    pub fn metadata(&self) -> &CheckpointMetadata {
        match self {
            Self::Lqp(c) => &c.metadata,
            Self::Mlp(c) => &c.metadata,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: not a valid checkpoint: {e}", path.as_ref().display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> CheckpointMetadata {
        CheckpointMetadata {
            system: "double_integrator".into(),
            seed: 7,
            git_rev: "unknown".into(),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn lqp_round_trip_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bounds = [crate::model::Bound::new(-0.5, 0.5)];
        let p = LqpParams::init_random(2, &bounds, 4, 30, &mut rng).unwrap();
        let ck = Checkpoint::Lqp(LqpCheckpoint::new(&p, &FilterConfig::default(), meta()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let Checkpoint::Lqp(l) = back else { panic!("wrong kind") };
        assert_eq!(l.params().unwrap(), p);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in [
            "n_qp", "m_qp", "n_sys", "m_sys", "H", "W_b", "b_b", "log_std", "n_iter", "alpha", "eps",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["H"].as_array().unwrap().len(), 30);
        assert_eq!(v["metadata"]["seed"], 7);
    }

    #[test]
    fn mlp_checkpoint_is_distinguished() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = MlpPolicy::init(2, DVector::zeros(1), &[5], &mut rng).unwrap();
        let ck = Checkpoint::Mlp(MlpCheckpoint::new(&policy, meta()));
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert!(matches!(back, Checkpoint::Mlp(_)));
        let Checkpoint::Mlp(m) = back else { unreachable!() };
        assert_eq!(m.policy().unwrap(), policy);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = [crate::model::Bound::new(-0.5, 0.5)];
        let p = LqpParams::init_random(2, &bounds, 4, 6, &mut rng).unwrap();
        let mut ck = LqpCheckpoint::new(&p, &FilterConfig::default(), meta());
        ck.m_qp = 7;
        assert!(ck.params().is_err());
    }
}
