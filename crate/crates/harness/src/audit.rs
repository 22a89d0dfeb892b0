//! Parameter audit: constructed counts against closed forms, and the
//! attention overhead relative to the single-flow baseline.

use tdaf_core::{anar_param_count, ModelMode, R2dnsModel};

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub total: usize,
    pub stages: usize,
    pub attention: usize,
    pub head: usize,
    /// Sum of the closed-form attention counts of every built module.
    pub attention_analytic: usize,
    pub attention_modules: usize,
    pub baseline_total: usize,
    pub overhead_pct: f64,
}

impl ParamAudit {
    pub fn consistent(&self) -> bool {
        self.attention == self.attention_analytic && self.stages + self.attention + self.head == self.total
    }
}

pub fn audit(cfg: &RunConfig) -> Result<ParamAudit> {
    let model = R2dnsModel::<f32>::build(&cfg.model_config(), cfg.seed)?;
    let mut base_cfg = cfg.model_config();
    base_cfg.num_flows = 1;
    base_cfg.mode = ModelMode::Baseline;
    let baseline = R2dnsModel::<f32>::build(&base_cfg, cfg.seed)?;
    let total = model.store.num_params();
    let baseline_total = baseline.store.num_params();
    Ok(ParamAudit {
        total,
        stages: model.stage_param_count(),
        attention: model.store.num_params_with_prefix("attn"),
        head: model.head_param_count(),
        attention_analytic: model.attentions().iter().map(|m| anar_param_count(m.config())).sum(),
        attention_modules: model.attentions().len(),
        baseline_total,
        overhead_pct: 100.0 * (total as f64 - baseline_total as f64) / baseline_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_audits_cleanly() {
        let a = audit(&RunConfig::default()).unwrap();
        assert!(a.consistent(), "{a:?}");
        assert_eq!(a.attention_modules, 2);
        assert!(a.overhead_pct > 0.0);
        let base = audit(&RunConfig {
            flows: 1,
            ..RunConfig::default()
        })
        .unwrap();
        assert_eq!(base.overhead_pct, 0.0);
        assert_eq!(base.total, a.baseline_total);
    }
}
