use std::fmt::Write;

use mose::model::{Model, ModelConfig};
use mose::moe::ParamCount;
use mose::Result;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub layer: String,
    pub apc: usize,
    pub spc: usize,
}

impl AuditRow {
    fn new(layer: impl Into<String>, c: ParamCount) -> Self {
        AuditRow {
            layer: layer.into(),
            apc: c.active,
            spc: c.sparse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub layers: Vec<AuditRow>,
    /// One feed-forward sublayer (MLP or MoE); every block has the same.
    pub feed_forward: AuditRow,
    pub total: AuditRow,
}

pub fn audit_report(cfg: &ModelConfig) -> Result<AuditReport> {
    let model = Model::<f32>::new(cfg.clone(), 0)?;
    let layers: Vec<AuditRow> = model.net.param_report().into_iter().map(|(n, c)| AuditRow::new(n, c)).collect();
    let ffn = model.net.groups[0].blocks[0].ffn_param_count();
    let kind = match &cfg.moe {
        Some(m) => format!("MoE {}/{}{}", m.experts, m.active, if m.smart_merger { " + SM" } else { "" }),
        None => format!("MLP hidden {}", cfg.mlp_width()),
    };
    Ok(AuditReport {
        layers,
        feed_forward: AuditRow::new(kind, ffn),
        total: AuditRow::new("total", model.net.param_count()),
    })
}

impl AuditReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:>12} {:>12}", "layer", "APC", "SPC");
        for r in &self.layers {
            let _ = writeln!(s, "{:<32} {:>12} {:>12}", r.layer, r.apc, r.spc);
        }
        let _ = writeln!(s, "{:<32} {:>12} {:>12}", self.total.layer, self.total.apc, self.total.spc);
        let f = &self.feed_forward;
        let _ = writeln!(s, "feed-forward layer ({}): APC {} SPC {}", f.layer, f.apc, f.spc);
        s
    }
}
