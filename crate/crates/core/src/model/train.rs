//! Gradients and training for the toy model.

use rand::seq::SliceRandom;

use super::{Block, ModelView, SeqForward, TransformerModel};
use crate::error::{Error, Result};
use crate::linalg::{matmul_a_bt, matmul_at_b_acc, rmsnorm_backward, softmax};
use crate::rng::{stream, Stream};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Gradients for every tensor a view touches, indexed like the view.
#[derive(Debug, Clone)]
pub struct ViewGrads {
    pub embedding: Vec<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    pub unembed: Vec<f64>,
}

impl ViewGrads {
    pub fn zeros(view: &ModelView<'_>) -> Self {
        let m = view.model;
        Self {
            embedding: vec![0.0; m.embedding.len()],
            blocks: view.layers.iter().map(|l| l.block.zeros_like()).collect(),
            final_norm: vec![0.0; m.final_norm.len()],
            unembed: vec![0.0; m.unembed.len()],
        }
    }
}

/// Back-propagates `dlogits` through a recorded sequence forward.
pub(crate) fn backward_from_logits(
    view: &ModelView<'_>,
    fwd: &SeqForward,
    tokens: &[u32],
    dlogits: &[f64],
    grads: &mut ViewGrads,
) {
    let m = view.model;
    let d = m.config.d_model;
    let v = m.config.vocab;
    let t_len = tokens.len();
    matmul_at_b_acc(&mut grads.unembed, &fwd.final_norm, dlogits, t_len, d, v);
    let dnf = matmul_a_bt(dlogits, &m.unembed, t_len, v, d);
    let mut dx = rmsnorm_backward(
        &fwd.final_in,
        &m.final_norm,
        &fwd.final_rms,
        &dnf,
        &mut grads.final_norm,
    );
    for (i, (layer, tape)) in view.layers.iter().zip(&fwd.tapes).enumerate().rev() {
        dx = layer.block.backward(tape, &dx, &mut grads.blocks[i]);
    }
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &mut grads.embedding[tok as usize * d..(tok as usize + 1) * d];
        for (g, x) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
            *g += x;
        }
    }
}

/// Next-token cross-entropy summed over positions, with `dlogits` scaled by
/// `1 / normaliser`. Returns the summed loss.
fn cross_entropy(
    logits: &[f64],
    tokens: &[u32],
    vocab: usize,
    normaliser: f64,
    dlogits: &mut [f64],
) -> f64 {
    let mut loss = 0.0;
    for t in 0..tokens.len() - 1 {
        let target = tokens[t + 1] as usize;
        let p = softmax(&logits[t * vocab..(t + 1) * vocab]);
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
        let row = &mut dlogits[t * vocab..(t + 1) * vocab];
        for (j, (g, pj)) in row.iter_mut().zip(&p).enumerate() {
            *g = (pj - if j == target { 1.0 } else { 0.0 }) / normaliser;
        }
    }
    loss
}

fn predicted_positions(data: &[Vec<u32>]) -> usize {
    data.iter().map(|s| s.len().saturating_sub(1)).sum()
}

/// Mean next-token cross-entropy of the full model over `data`.
pub fn mean_loss(model: &TransformerModel, data: &[Vec<u32>]) -> Result<f64> {
    let n = predicted_positions(data);
    if n == 0 {
        return Err(Error::Argument("no predicted positions in data".into()));
    }
    let view = model.full_view();
    let v = model.config.vocab;
    let mut total = 0.0;
    for seq in data {
        let logits = view.logits(seq)?;
        let mut scratch = vec![0.0; logits.len()];
        total += cross_entropy(&logits, seq, v, 1.0, &mut scratch);
    }
    Ok(total / n as f64)
}

/// Loss and full-model gradients for one batch.
pub fn loss_and_grads(
    model: &TransformerModel,
    batch: &[Vec<u32>],
) -> Result<(f64, TransformerModel)> {
    let n = predicted_positions(batch);
    if n == 0 {
        return Err(Error::Argument("no predicted positions in batch".into()));
    }
    let view = model.full_view();
    let v = model.config.vocab;
    let mut vg = ViewGrads::zeros(&view);
    let mut total = 0.0;
    for seq in batch {
        let fwd = view.forward_seq(seq)?;
        let mut dlogits = vec![0.0; fwd.logits.len()];
        total += cross_entropy(&fwd.logits, seq, v, n as f64, &mut dlogits);
        backward_from_logits(&view, &fwd, seq, &dlogits, &mut vg);
    }
    let grads = TransformerModel {
        config: model.config,
        embedding: vg.embedding,
        blocks: vg.blocks,
        final_norm: vg.final_norm,
        unembed: vg.unembed,
    };
    Ok((total / n as f64, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest loss seen, the initial model included.
    pub model: TransformerModel,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub loss_history: Vec<f64>,
}

pub const TRAIN_BATCH: usize = 8;

/// Mini-batch Adam on next-token cross-entropy over `data`, returning the
/// best checkpoint by full-data loss.
pub fn train_model(
    model: &TransformerModel,
    data: &[Vec<u32>],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training data is empty".into()));
    }
    let initial_loss = mean_loss(model, data)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence(format!("initial loss {initial_loss}")));
    }
    let mut best = model.clone();
    let mut best_loss = initial_loss;
    let mut history = vec![initial_loss];
    let mut current = model.clone();
    let mut opt = Adam::new(lr);
    let mut rng = stream(seed, Stream::Training);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(TRAIN_BATCH) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (_, grads) = loss_and_grads(&current, &batch)?;
            opt.step(current.params_mut(), grads.params());
            current.round_to_dtype();
        }
        let loss = mean_loss(&current, data)?;
        if !loss.is_finite() || !current.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss} after epoch {epoch}"
            )));
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
    }
    Ok(TrainOutcome {
        model: best,
        initial_loss,
        best_loss,
        loss_history: history,
    })
}

fn check_block_io(block: &Block, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<usize> {
    let d = block.shape.d_model;
    if inputs.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} input sequences but {} target sequences",
            inputs.len(),
            targets.len()
        )));
    }
    let mut count = 0;
    for (x, y) in inputs.iter().zip(targets) {
        if x.is_empty() || x.len() % d != 0 || x.len() != y.len() {
            return Err(Error::Argument(
                "block input/target shapes are inconsistent".into(),
            ));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite block input or target".into()));
        }
        count += x.len();
    }
    if count == 0 {
        return Err(Error::Argument("no block activations".into()));
    }
    Ok(count)
}

/// Mean squared error between the block's output and `targets`.
pub fn block_loss(block: &Block, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let count = check_block_io(block, inputs, targets)?;
    let d = block.shape.d_model;
    let mut sse = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let positions: Vec<u32> = (0..(x.len() / d) as u32).collect();
        let tape = block.forward_seq(x, &positions);
        sse += tape
            .out
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let loss = sse / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("block loss is not finite".into()));
    }
    Ok(loss)
}

/// MSE between the block's output on each input sequence and the matching
/// target, with gradients for every block parameter.
pub fn block_loss_and_grad(
    block: &Block,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<(f64, Block)> {
    let count = check_block_io(block, inputs, targets)?;
    let d = block.shape.d_model;
    let mut grads = block.zeros_like();
    let mut sse = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let positions: Vec<u32> = (0..(x.len() / d) as u32).collect();
        let tape = block.forward_seq(x, &positions);
        let mut dout = Vec::with_capacity(x.len());
        for (a, b) in tape.out.iter().zip(y) {
            sse += (a - b) * (a - b);
            dout.push(2.0 * (a - b) / count as f64);
        }
        block.backward(&tape, &dout, &mut grads);
    }
    let loss = sse / count as f64;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric(
            "block loss or gradient is not finite".into(),
        ));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::calibration::generate_calibration;
    use crate::model::{BlockShape, ModelConfig};
    use crate::rng::stream;
    use rand::Rng as _;

    fn random_case(seed: u64) -> (Block, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let shape = BlockShape {
            d_model: 4,
            n_heads: 2,
            head_dim: 2,
            d_ff: 6,
        };
        let mut rng = stream(seed, Stream::Verification);
        let mut block = Block::init(shape, &mut rng);
        // Perturb norm gains and biases away from their trivial init.
        for p in [
            &mut block.attn_norm,
            &mut block.mlp_norm,
            &mut block.b_up,
            &mut block.b_down,
        ] {
            for x in p.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
        let mut seqs = |n: usize| -> Vec<Vec<f64>> {
            (0..2)
                .map(|_| (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let inputs = seqs(3);
        let targets = seqs(3);
        (block, inputs, targets)
    }

    /// Central differences over every scalar parameter.
    fn finite_difference(
        block: &Block,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let h = 1e-5;
        let mut out = Vec::new();
        for pi in 0..10 {
            let n = block.params()[pi].len();
            let mut g = vec![0.0; n];
            for (j, gj) in g.iter_mut().enumerate() {
                let mut plus = block.clone();
                plus.params_mut()[pi][j] += h;
                let mut minus = block.clone();
                minus.params_mut()[pi][j] -= h;
                let lp = block_loss(&plus, inputs, targets).unwrap();
                let lm = block_loss(&minus, inputs, targets).unwrap();
                *gj = (lp - lm) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn finite_differences() {
        let (block, inputs, targets) = random_case(21);
        let (_, grads) = block_loss_and_grad(&block, &inputs, &targets).unwrap();
        let fd = finite_difference(&block, &inputs, &targets);
        for (pi, (analytic, numeric)) in grads.params().iter().zip(&fd).enumerate() {
            let diff: f64 = analytic
                .iter()
                .zip(numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = crate::linalg::norm(numeric).max(1e-8);
            assert!(
                diff / scale < 1e-4,
                "{}: rel err {}",
                Block::PARAM_NAMES[pi],
                diff / scale
            );
        }
    }

    #[test]
    fn zero_at_own_output() {
        let (block, inputs, _) = random_case(5);
        let targets: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| block.forward_seq(x, &[0, 1, 2]).out)
            .collect();
        let (loss, grads) = block_loss_and_grad(&block, &inputs, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.params().iter().all(|p| p.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn doubling_residual_quadruples_loss() {
        let (block, inputs, targets) = random_case(6);
        let outs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| block.forward_seq(x, &[0, 1, 2]).out)
            .collect();
        let doubled: Vec<Vec<f64>> = outs
            .iter()
            .zip(&targets)
            .map(|(o, t)| o.iter().zip(t).map(|(a, b)| a + 2.0 * (b - a)).collect())
            .collect();
        let l1 = block_loss(&block, &inputs, &targets).unwrap();
        let l2 = block_loss(&block, &inputs, &doubled).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_and_shape_errors() {
        let (block, inputs, mut targets) = random_case(7);
        targets[0][0] = f64::NAN;
        assert!(matches!(
            block_loss_and_grad(&block, &inputs, &targets),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            block_loss_and_grad(&block, &inputs, &targets[..1]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        let cfg = ModelConfig::new(2, 4, 2, 6, 8);
        let model = TransformerModel::build(cfg, 3).unwrap();
        let data = generate_calibration(2, 2, 5, 6).unwrap();
        let (_, grads) = loss_and_grads(&model, &data).unwrap();
        let h = 1e-5;
        let analytic: Vec<f64> = grads
            .params()
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect();
        let mut idx = 0;
        let n_params = model.params().len();
        for pi in 0..n_params {
            for j in (0..model.params()[pi].len()).step_by(3) {
                let mut plus = model.clone();
                plus.params_mut()[pi][j] += h;
                let mut minus = model.clone();
                minus.params_mut()[pi][j] -= h;
                let num = (mean_loss(&plus, &data).unwrap() - mean_loss(&minus, &data).unwrap())
                    / (2.0 * h);
                let offset: usize = model.params()[..pi].iter().map(|p| p.len()).sum();
                let a = analytic[offset + j];
                assert!(
                    (a - num).abs() < 1e-6 + 1e-4 * num.abs(),
                    "param {pi}[{j}]: {a} vs {num}"
                );
                idx += 1;
            }
        }
        assert!(idx > 50);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = ModelConfig::new(2, 8, 2, 8, 16);
        let model = TransformerModel::build(cfg, 1).unwrap();
        let data = generate_calibration(4, 16, 12, 8).unwrap();
        let a = train_model(&model, &data, 50, 1e-2, 9).unwrap();
        assert!(a.best_loss < a.initial_loss);
        let b = train_model(&model, &data, 50, 1e-2, 9).unwrap();
        assert_eq!(a.model, b.model);
        let none = train_model(&model, &data, 0, 1e-2, 9).unwrap();
        assert_eq!(none.model, model);
        assert!(matches!(
            train_model(&model, &[], 1, 1e-2, 9),
            Err(Error::Argument(_))
        ));
    }
}
