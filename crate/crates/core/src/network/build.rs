use super::spec::{Attention, ModuleKind, ModuleSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

fn gaussian(rng: &mut Rng, out: usize, fan_in: usize) -> Matrix {
    rng.normal_matrix(out, fan_in, 1.0 / (fan_in as f64).sqrt())
}

/// `depth` pre-norm blocks, each
/// `[residual_begin, rmsnorm, attention, residual_end,
///   residual_begin, rmsnorm, linear(w→4w), relu2, linear(4w→w), residual_end]`.
/// Weights are Gaussian with standard deviation `1/√fan_in`; gains are 1.
/// Attention and linear modules are marked for quantization.
pub fn build_toy_transformer(
    depth: usize,
    width: usize,
    heads: usize,
    seq_len: usize,
    causal: bool,
    rng: &mut Rng,
) -> Result<NetworkSpec> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} must be a positive multiple of heads {heads}"
        )));
    }
    let mut modules = Vec::with_capacity(10 * depth);
    push_blocks(&mut modules, depth, width, heads, causal, rng);
    NetworkSpec::new(modules, width, seq_len)
}

/// Like [`build_toy_transformer`] without the attention half of each block.
pub fn build_toy_mlp(depth: usize, width: usize, seq_len: usize, rng: &mut Rng) -> Result<NetworkSpec> {
    if width == 0 {
        return Err(Error::Config("width must be positive".into()));
    }
    let mut modules = Vec::with_capacity(6 * depth);
    for b in 0..depth {
        push_mlp(&mut modules, b, width, rng);
    }
    NetworkSpec::new(modules, width, seq_len)
}

fn push_blocks(modules: &mut Vec<ModuleSpec>, depth: usize, width: usize, heads: usize, causal: bool, rng: &mut Rng) {
    for b in 0..depth {
        let attn = Attention {
            wq: gaussian(rng, width, width),
            wk: gaussian(rng, width, width),
            wv: gaussian(rng, width, width),
            wo: gaussian(rng, width, width),
            heads,
            causal,
        };
        modules.push(ModuleSpec::plain(ModuleKind::ResidualBegin(format!("b{b}.attn"))));
        modules.push(ModuleSpec::plain(ModuleKind::RmsNorm(vec![1.0; width])));
        modules.push(ModuleSpec::new(ModuleKind::Attention(Box::new(attn)), true));
        modules.push(ModuleSpec::plain(ModuleKind::ResidualEnd(format!("b{b}.attn"))));
        push_mlp(modules, b, width, rng);
    }
}

/// Causal character model over one-hot inputs:
/// `[embedding, blocks…, rmsnorm, head]`. The embedding (`width × vocab`,
/// unit-variance entries) stays in full precision; the head is quantized.
pub fn build_char_lm(
    depth: usize,
    width: usize,
    heads: usize,
    seq_len: usize,
    vocab: usize,
    rng: &mut Rng,
) -> Result<NetworkSpec> {
    if width == 0 || heads == 0 || width % heads != 0 || vocab == 0 {
        return Err(Error::Config(format!(
            "width {width} must be a positive multiple of heads {heads}, vocab {vocab} positive"
        )));
    }
    let mut modules = Vec::with_capacity(10 * depth + 3);
    modules.push(ModuleSpec::plain(ModuleKind::Linear(rng.normal_matrix(width, vocab, 1.0))));
    push_blocks(&mut modules, depth, width, heads, true, rng);
    modules.push(ModuleSpec::plain(ModuleKind::RmsNorm(vec![1.0; width])));
    modules.push(ModuleSpec::new(ModuleKind::Linear(gaussian(rng, vocab, width)), true));
    NetworkSpec::with_input_width(modules, width, seq_len, vocab)
}

fn push_mlp(modules: &mut Vec<ModuleSpec>, b: usize, width: usize, rng: &mut Rng) {
    modules.push(ModuleSpec::plain(ModuleKind::ResidualBegin(format!("b{b}.mlp"))));
    modules.push(ModuleSpec::plain(ModuleKind::RmsNorm(vec![1.0; width])));
    modules.push(ModuleSpec::new(ModuleKind::Linear(gaussian(rng, 4 * width, width)), true));
    modules.push(ModuleSpec::plain(ModuleKind::Relu2));
    modules.push(ModuleSpec::new(ModuleKind::Linear(gaussian(rng, width, 4 * width)), true));
    modules.push(ModuleSpec::plain(ModuleKind::ResidualEnd(format!("b{b}.mlp"))));
}
