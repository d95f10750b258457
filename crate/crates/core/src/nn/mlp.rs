use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAX_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// `Linear → BatchNorm → ReLU`, or a bare `Linear` when `norm` is `None`
/// (the final block).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub norm: Option<BatchNorm>,
}

impl Block {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Small MLP used for the reverse query transform ψ and the new-side head ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTransform {
    blocks: Vec<Block>,
    mode: Mode,
    norm: BatchNormConfig,
    generation: u64,
}

struct BlockCache {
    input: Matrix,
    xhat: Option<Matrix>,
    inv_std: Option<Vec<f64>>,
    active: Option<Vec<bool>>,
}

/// Activations recorded by a forward pass, consumed by [`MlpTransform::backward`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    mode: Mode,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Parameter gradients (same layout as the network) plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub input: Matrix,
}

impl Gradients {
    /// Flat views in the order used by [`MlpTransform::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weight.as_slice());
            out.push(b.bias.as_slice());
            if let (Some(g), Some(be)) = (&b.gamma, &b.beta) {
                out.push(g.as_slice());
                out.push(be.as_slice());
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl MlpTransform {
    /// `num_blocks` blocks mapping `d_in → d_out`; hidden blocks are
    /// `max(d_in, d_out)` wide. Weights are uniform in `±sqrt(6/(fan_in+fan_out))`,
    /// biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        num_blocks: usize,
        norm: BatchNormConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=MAX_BLOCKS).contains(&num_blocks) {
            return Err(Error::invalid(format!(
                "transform needs 1..={MAX_BLOCKS} blocks, got {num_blocks}"
            )));
        }
        if d_in == 0 || d_out == 0 {
            return Err(Error::invalid("transform dims must be positive"));
        }
        let hidden = d_in.max(d_out);
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut width = d_in;
        for b in 0..num_blocks {
            let last = b + 1 == num_blocks;
            let out = if last { d_out } else { hidden };
            let a = (6.0 / (width + out) as f64).sqrt();
            let weight: Vec<f64> = (0..out * width).map(|_| rng.random_range(-a..a)).collect();
            blocks.push(Block {
                weight: Matrix::from_vec(out, width, weight)?,
                bias: vec![0.0; out],
                norm: (!last).then(|| BatchNorm::new(out)),
            });
            width = out;
        }
        Self::from_blocks(blocks, norm)
    }

    pub fn from_blocks(blocks: Vec<Block>, norm: BatchNormConfig) -> Result<Self> {
        if !(1..=MAX_BLOCKS).contains(&blocks.len()) {
            return Err(Error::invalid(format!(
                "transform needs 1..={MAX_BLOCKS} blocks, got {}",
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let last = i + 1 == blocks.len();
            if last == b.norm.is_some() {
                return Err(Error::invalid(
                    "every block but the last carries batch norm; the last is affine only",
                ));
            }
            Error::check_dim(b.d_out(), b.bias.len())?;
            if let Some(n) = &b.norm {
                for v in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
                    Error::check_dim(b.d_out(), v.len())?;
                }
                if n.running_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::invalid("running variance must be positive"));
                }
            }
            if i > 0 {
                Error::check_dim(blocks[i - 1].d_out(), b.d_in())?;
            }
        }
        let net = Self {
            blocks,
            mode: Mode::Train,
            norm,
            generation: 0,
        };
        if !net.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn norm_config(&self) -> BatchNormConfig {
        self.norm
    }

    pub fn d_in(&self) -> usize {
        self.blocks[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.blocks[self.blocks.len() - 1].d_out()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.weight.as_slice().len()
                    + b.bias.len()
                    + b.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len())
            })
            .sum()
    }

    /// Mutable flat views of the trainable parameters: per block weight,
    /// bias, then gamma and beta when present. Invalidates forward caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.weight.as_mut_slice());
            out.push(b.bias.as_mut_slice());
            if let Some(n) = &mut b.norm {
                out.push(n.gamma.as_mut_slice());
                out.push(n.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            out.extend_from_slice(b.weight.as_slice());
            out.extend_from_slice(&b.bias);
            if let Some(n) = &b.norm {
                out.extend_from_slice(&n.gamma);
                out.extend_from_slice(&n.beta);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.weight.is_finite()
                && b.bias.iter().all(|v| v.is_finite())
                && b.norm.as_ref().is_none_or(|n| {
                    [&n.gamma, &n.beta, &n.running_mean, &n.running_var]
                        .iter()
                        .all(|v| v.iter().all(|x| x.is_finite()))
                })
        })
    }

    /// Forward pass in the current mode. Train mode normalizes with batch
    /// statistics and folds them into the running statistics.
    pub fn forward(&mut self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        Error::check_dim(self.d_in(), batch.cols())?;
        let train = self.mode == Mode::Train;
        if train && batch.rows() < 2 {
            return Err(Error::invalid(
                "train-mode forward needs at least 2 rows for batch statistics",
            ));
        }
        let momentum = self.norm.momentum;
        let eps = self.norm.eps;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for block in &mut self.blocks {
            let mut z = x.matmul_transposed(&block.weight)?;
            add_bias(&mut z, &block.bias);
            let Some(bn) = &mut block.norm else {
                caches.push(BlockCache {
                    input: x,
                    xhat: None,
                    inv_std: None,
                    active: None,
                });
                x = z;
                continue;
            };
            let (mean, var) = if train {
                let (mean, var) = column_moments(&z);
                let n = z.rows() as f64;
                for j in 0..mean.len() {
                    bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * mean[j];
                    bn.running_var[j] =
                        (1.0 - momentum) * bn.running_var[j] + momentum * var[j] * n / (n - 1.0);
                }
                (mean, var)
            } else {
                (bn.running_mean.clone(), bn.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (xhat, y, active) = normalize_relu(&z, &mean, &inv_std, &bn.gamma, &bn.beta);
            caches.push(BlockCache {
                input: x,
                xhat: Some(xhat),
                inv_std: Some(inv_std),
                active: Some(active),
            });
            x = y;
        }
        Ok((
            x,
            ForwardCache {
                blocks: caches,
                mode: self.mode,
                generation: self.generation,
            },
        ))
    }

    /// Eval-mode forward; never touches running statistics.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.d_in(), batch.cols())?;
        let mut x = batch.clone();
        for block in &self.blocks {
            let mut z = x.matmul_transposed(&block.weight)?;
            add_bias(&mut z, &block.bias);
            x = match &block.norm {
                None => z,
                Some(bn) => {
                    let inv_std: Vec<f64> = bn
                        .running_var
                        .iter()
                        .map(|v| 1.0 / (v + self.norm.eps).sqrt())
                        .collect();
                    normalize_relu(&z, &bn.running_mean, &inv_std, &bn.gamma, &bn.beta).1
                }
            };
        }
        Ok(x)
    }

    /// Exact gradients of a scalar loss given `∂loss/∂output`, including
    /// batch-norm backward through the batch statistics.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<Gradients> {
        if cache.generation != self.generation || cache.blocks.len() != self.blocks.len() {
            return Err(Error::StaleCache);
        }
        if cache.mode != Mode::Train {
            return Err(Error::invalid("backward needs a train-mode forward cache"));
        }
        Error::check_dim(self.d_out(), grad_output.cols())?;
        Error::check_dim(cache.blocks[0].input.rows(), grad_output.rows())?;
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut g = grad_output.clone();
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dz, gamma_grad, beta_grad) = match (&block.norm, &bc.xhat, &bc.inv_std, &bc.active) {
                (Some(bn), Some(xhat), Some(inv_std), Some(active)) => {
                    let (dz, dgamma, dbeta) = batch_norm_backward(&g, xhat, inv_std, active, &bn.gamma);
                    (dz, Some(dgamma), Some(dbeta))
                }
                _ => (g, None, None),
            };
            let weight = dz.transpose_matmul(&bc.input)?;
            let bias = dz.column_sums();
            g = dz.matmul(&block.weight)?;
            grads.push(BlockGrads {
                weight,
                bias,
                gamma: gamma_grad,
                beta: beta_grad,
            });
        }
        grads.reverse();
        Ok(Gradients {
            blocks: grads,
            input: g,
        })
    }
}

fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Per-column mean and biased variance.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mean: Vec<f64> = z.column_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; z.cols()];
    for i in 0..z.rows() {
        for (j, v) in z.row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

fn normalize_relu(
    z: &Matrix,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Matrix, Matrix, Vec<bool>) {
    let mut xhat = Matrix::zeros(z.rows(), z.cols());
    let mut out = Matrix::zeros(z.rows(), z.cols());
    let mut active = vec![false; z.rows() * z.cols()];
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            let h = (z[(i, j)] - mean[j]) * inv_std[j];
            let y = gamma[j] * h + beta[j];
            xhat[(i, j)] = h;
            if y > 0.0 {
                out[(i, j)] = y;
                active[i * z.cols() + j] = true;
            }
        }
    }
    (xhat, out, active)
}

fn batch_norm_backward(
    grad_act: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    active: &[bool],
    gamma: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, d) = (grad_act.rows(), grad_act.cols());
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let dy = if active[i * d + j] { grad_act[(i, j)] } else { 0.0 };
            dgamma[j] += dy * xhat[(i, j)];
            dbeta[j] += dy;
            dxhat[(i, j)] = dy * gamma[j];
        }
    }
    let sum_dxhat = dxhat.column_sums();
    let mut sum_dxhat_xhat = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            sum_dxhat_xhat[j] += dxhat[(i, j)] * xhat[(i, j)];
        }
    }
    let nf = n as f64;
    let mut dz = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            dz[(i, j)] = inv_std[j] / nf
                * (nf * dxhat[(i, j)] - sum_dxhat[j] - xhat[(i, j)] * sum_dxhat_xhat[j]);
        }
    }
    (dz, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(d: usize) -> MlpTransform {
        MlpTransform::from_blocks(
            vec![Block {
                weight: Matrix::identity(d),
                bias: vec![0.0; d],
                norm: None,
            }],
            BatchNormConfig::default(),
        )
        .unwrap()
    }

    fn batch() -> Matrix {
        Matrix::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap()
    }

    #[test]
    fn identity_block_passes_input_through() {
        let mut net = identity_net(2);
        let (out, _) = net.forward(&batch()).unwrap();
        assert_eq!(out, batch());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net =
            MlpTransform::new(2, 3, 3, BatchNormConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        net.forward(&batch()).unwrap();
        net.set_mode(Mode::Eval);
        let a = net.infer(&batch()).unwrap();
        let (b, _) = net.forward(&batch()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.infer(&batch()).unwrap());
    }

    #[test]
    fn sum_loss_through_identity() {
        let mut net = identity_net(2);
        let (out, cache) = net.forward(&batch()).unwrap();
        let ones = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let g = net.backward(&cache, &ones).unwrap();
        assert_eq!(g.input, ones);
        assert_eq!(out.rows(), 3);
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut net =
            MlpTransform::new(2, 2, 2, BatchNormConfig::default(), &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        let (_, cache) = net.forward(&batch()).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_train_batch_is_rejected() {
        let mut net =
            MlpTransform::new(2, 2, 2, BatchNormConfig::default(), &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        assert!(net.forward(&batch().select_rows(&[0])).is_err());
        net.set_mode(Mode::Eval);
        assert!(net.forward(&batch().select_rows(&[0])).is_ok());
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut net =
            MlpTransform::new(2, 2, 1, BatchNormConfig::default(), &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        let (_, cache) = net.forward(&batch()).unwrap();
        net.param_slices_mut()[0][0] += 1.0;
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(3, 2)),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let mut net = identity_net(3);
        assert!(matches!(net.forward(&batch()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn block_count_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MlpTransform::new(2, 2, 0, BatchNormConfig::default(), &mut rng).is_err());
        assert!(MlpTransform::new(2, 2, 6, BatchNormConfig::default(), &mut rng).is_err());
        let net = MlpTransform::new(4, 3, 5, BatchNormConfig::default(), &mut rng).unwrap();
        assert_eq!(net.blocks().len(), 5);
        assert_eq!(net.blocks()[1].d_in(), 4);
        assert_eq!(net.d_out(), 3);
    }

    #[test]
    fn running_mean_converges_geometrically() {
        let mut net =
            MlpTransform::new(2, 2, 2, BatchNormConfig::default(), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        let x = batch();
        let mut z = x.matmul_transposed(&net.blocks()[0].weight).unwrap();
        add_bias(&mut z, &net.blocks()[0].bias);
        let (target, _) = column_moments(&z);
        let gap0: Vec<f64> = target.iter().map(|t| t - 0.0).collect();
        for step in 1..=20 {
            net.forward(&x).unwrap();
            let rm = &net.blocks()[0].norm.as_ref().unwrap().running_mean;
            for j in 0..2 {
                let expected = gap0[j] * 0.9f64.powi(step);
                assert!(((target[j] - rm[j]) - expected).abs() < 1e-12);
            }
        }
    }
}
