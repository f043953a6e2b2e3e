//! Deterministic differentiable-computation substrate.
//!
//! Models in this crate are fixed and shallow, so each one writes its own
//! closed-form backward pass on top of the kernels here rather than building
//! a computation graph. [`gradcheck`] is the oracle that keeps those passes
//! honest.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_grad_check, GradCheckReport};
pub use layers::{Dense, Init, Mlp, MlpCache};
pub use optim::{optimizer_step, Adam};
pub use params::{ParamBuilder, ParamId, ParameterSet};
pub use rng::RngStream;
pub use tensor::Tensor;

use std::path::Path;

use crate::{Error, Result};

/// Writes a checkpoint: the parameter text plus one `# meta ` line carrying a
/// JSON description of the owning model.
pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, params: &ParameterSet) -> Result<()> {
    let mut text = params.to_text();
    text.push_str("# meta ");
    text.push_str(&serde_json::to_string(meta)?);
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParameterSet)> {
    let text = std::fs::read_to_string(path)?;
    let params = ParameterSet::from_text(&text)?;
    let meta = text
        .lines()
        .find_map(|l| l.strip_prefix("# meta "))
        .ok_or_else(|| Error::Parse(format!("{}: missing meta line", path.display())))?;
    Ok((serde_json::from_str(meta)?, params))
}
