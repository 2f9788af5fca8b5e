use crate::decomposition::{decompose_network, DecompRecord};
use crate::error::Result;
use crate::network::{forward_tape, ModuleKind, NetworkSpec, Practical, SiteQuantizer};
use crate::quant::QuantConfig;

use super::{evaluate, Setup, TrainConfig};

#[derive(Clone, Debug)]
pub struct PtqReport {
    pub quant: QuantConfig,
    pub val_before: f64,
    pub val_after: f64,
    /// `val_after − val_before`.
    pub delta: f64,
    /// The network with every quantized module's weights replaced by their
    /// quantized values.
    pub checkpoint: NetworkSpec,
    /// Decomposition on the first validation example.
    pub decomposition: Vec<DecompRecord>,
}

/// Quantizes a trained network once and measures the validation loss
/// before (full precision) and after (quantized weights and inputs).
pub fn ptq_apply(cfg: &TrainConfig, net: &NetworkSpec, quant: &QuantConfig) -> Result<PtqReport> {
    let setup = Setup::new(cfg)?;
    let val_before = evaluate(net, &setup.val, None)?;
    let mut q = Practical::new(*quant)?;
    let mut total = 0.0;
    for ex in &setup.val {
        let (out, _) = forward_tape(net, ex.input(), Some(&mut q as &mut dyn SiteQuantizer))?;
        total += ex.loss(&out)?;
    }
    let val_after = total / setup.val.len() as f64;
    let mut checkpoint = net.clone();
    for (i, m) in checkpoint.modules.iter_mut().enumerate() {
        if !m.quantize {
            continue;
        }
        let get = |slot: u8| q.cached_weight((i, slot)).cloned();
        match &mut m.kind {
            ModuleKind::Linear(w) => {
                if let Some(v) = get(1) {
                    *w = v;
                }
            }
            ModuleKind::Attention(a) => {
                for (slot, w) in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo].into_iter().enumerate() {
                    if let Some(v) = get(slot as u8 + 1) {
                        *w = v;
                    }
                }
            }
            _ => {}
        }
    }
    let decomposition = decompose_network(net, setup.val[0].input(), quant)?;
    Ok(PtqReport {
        quant: *quant,
        val_before,
        val_after,
        delta: val_after - val_before,
        checkpoint,
        decomposition,
    })
}
