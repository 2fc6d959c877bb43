use super::params::{ModelParams, ParamVars, Slot};
use crate::autodiff::{BatchStats, GradTape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Result of one detector forward pass recorded on a tape.
pub struct ForwardPass {
    /// Predictions `[N, S, S, B·5 + classes]`, all squashed into `[0, 1]`.
    pub output: Var,
    pub vars: ParamVars,
    /// Batch statistics per block (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// Runs the detector on `images` (`[N, C, H, W]`).
///
/// The parameters are not modified; in training mode the caller folds
/// `batch_stats` into the running statistics.
pub fn forward(tape: &mut GradTape, params: &ModelParams, images: Var, training: bool) -> Result<ForwardPass> {
    let cfg = params.config();
    let shape = tape.value(images).shape().to_vec();
    let expected = [cfg.in_channels, cfg.input_size.0, cfg.input_size.1];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::shape(format!(
            "detector expects images [N, {}, {}, {}], got {shape:?}",
            expected[0], expected[1], expected[2]
        )));
    }
    let mut vars = ParamVars::default();
    let mut batch_stats = Vec::new();
    let mut x = images;
    for (i, block) in params.blocks.iter().enumerate() {
        let k = tape.param(&block.kernel);
        let g = tape.param(&block.bn.gamma);
        let b = tape.param(&block.bn.beta);
        vars.entries.extend([(Slot::Kernel(i), k), (Slot::Gamma(i), g), (Slot::Beta(i), b)]);
        let conv = tape.conv2d(x, k, 1, 1)?;
        let normed = if training {
            let (out, stats) = tape.batch_norm_train(conv, g, b, block.bn.epsilon)?;
            batch_stats.push(stats);
            out
        } else {
            tape.batch_norm_eval(
                conv,
                g,
                b,
                block.bn.running_mean.data(),
                block.bn.running_var.data(),
                block.bn.epsilon,
            )?
        };
        let act = tape.leaky_relu(normed, LEAKY_SLOPE);
        x = tape.max_pool2d(act, 2, 2)?;
    }
    let hk = tape.param(&params.head.kernel);
    let hb = tape.param(&params.head.bias);
    vars.entries.extend([(Slot::HeadKernel, hk), (Slot::HeadBias, hb)]);
    let head = tape.conv2d(x, hk, 1, 0)?;
    let head = tape.add_channel_bias(head, hb)?;
    let nhwc = tape.nchw_to_nhwc(head)?;
    let output = tape.sigmoid(nhwc);
    Ok(ForwardPass { output, vars, batch_stats })
}

impl ModelParams {
    /// Inference-mode predictions `[N, S, S, B·5 + classes]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let x = tape.constant(images.clone());
        let pass = forward(&mut tape, self, x, false)?;
        Ok(tape.value(pass.output).clone())
    }
}
