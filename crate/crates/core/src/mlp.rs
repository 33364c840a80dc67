//! Hand-rolled MLP score network with reverse-mode gradients.
//!
//! The network maps `[x_t, c, time_features(t/T)]` to a score estimate of
//! the same dimension as `x_t`. Reverse-mode accumulation is written out
//! explicitly for the fixed affine-plus-activation shape; no autodiff
//! framework is involved. The trainer regresses the network onto the
//! conditional score of the noising kernel, `-eps / sqrt(1 - abar_t)`,
//! with the squared error weighted by `(1 - abar_t)` so the regression
//! target has bounded variance across timesteps.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::{ScoreModel, ToyWorld};

const MAGIC: &[u8; 7] = b"STGNET1";

/// Smooth activation; the choice is recorded in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`; smooth and asymptotically linear, which keeps the
    /// learned score usable on the far edges of the evaluation grid.
    #[default]
    Silu,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_deriv(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

/// Feed-forward score network `s(x_t, c, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreNet {
    dim: usize,
    num_steps: usize,
    time_emb: usize,
    layers: Vec<Layer>,
    activation: Activation,
}

/// Options for [`train_dsm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian spread with which training
    /// conditions are sampled around the world condition. Guidance moves
    /// the embedding at sampling time, so the net must be trained on a
    /// neighborhood of conditions, not a single point.
    pub cond_spread: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 60_000,
            learning_rate: 1e-3,
            seed: 7,
            cond_spread: 2.0,
        }
    }
}

/// A fixed minibatch of denoising-score-matching regression pairs.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    /// Network inputs, one column per example.
    pub inputs: DMatrix<f64>,
    /// Regression targets `-eps / sqrt(1 - abar_t)`, one column per example.
    pub targets: DMatrix<f64>,
    /// Per-example loss weights `(1 - abar_t)`.
    pub weights: Vec<f64>,
}

impl MlpScoreNet {
    /// Zero-initialized network. `hidden` lists the hidden-layer widths.
    pub fn new(dim: usize, hidden: &[usize], time_emb: usize, num_steps: usize) -> Result<Self> {
        if dim == 0 || num_steps == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        if time_emb % 2 != 0 {
            return Err(Error::InvalidArgument(
                "time embedding width must be even".into(),
            ));
        }
        let mut widths = vec![2 * dim + time_emb];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            dim,
            num_steps,
            time_emb,
            layers,
            activation: Activation::Silu,
        })
    }

    /// Deterministic seed-controlled initialization, uniform on
    /// `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    pub fn init_seeded(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let scale = (6.0 / layer.weight.ncols() as f64).sqrt();
            for v in layer.weight.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
            for v in layer.bias.iter_mut() {
                *v = 0.0;
            }
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn time_emb_width(&self) -> usize {
        self.time_emb
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weight.ncols()).collect();
        w.push(self.dim);
        w
    }

    /// Sinusoidal features of `t / T`.
    pub fn time_features(&self, t: usize) -> DVector<f64> {
        let u = t as f64 / self.num_steps as f64;
        let half = self.time_emb / 2;
        DVector::from_iterator(
            self.time_emb,
            (1..=half)
                .map(|k| (u * k as f64 * std::f64::consts::PI).sin())
                .chain((1..=half).map(|k| (u * k as f64 * std::f64::consts::PI).cos())),
        )
    }

    fn assemble_input(&self, x_t: &DVector<f64>, c: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        if x_t.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x_t.len(),
            });
        }
        if c.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: c.len(),
            });
        }
        if t == 0 || t > self.num_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                num_steps: self.num_steps,
            });
        }
        let temb = self.time_features(t);
        Ok(DVector::from_iterator(
            2 * self.dim + self.time_emb,
            x_t.iter().chain(c.iter()).chain(temb.iter()).cloned(),
        ))
    }

    /// Forward pass, also returning per-layer pre-activations and
    /// activations for reverse-mode accumulation.
    fn forward_cached(&self, input: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut act = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * &cur + &layer.bias;
            if i + 1 < self.layers.len() {
                cur = z.map(silu);
                pre.push(z);
                act.push(cur.clone());
            } else {
                cur = z;
            }
        }
        (cur, pre, act)
    }

    pub fn forward(&self, x_t: &DVector<f64>, c: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let input = self.assemble_input(x_t, c, t)?;
        Ok(self.forward_cached(&input).0)
    }

    /// Reverse-mode input gradients: `(cot^T ds/dx_t, cot^T ds/dc)`.
    pub fn vjp_inputs(
        &self,
        x_t: &DVector<f64>,
        c: &DVector<f64>,
        t: usize,
        cotangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if cotangent.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: cotangent.len(),
            });
        }
        let input = self.assemble_input(x_t, c, t)?;
        let (_, pre, _) = self.forward_cached(&input);
        let mut grad = cotangent.clone();
        for i in (0..self.layers.len()).rev() {
            grad = self.layers[i].weight.transpose() * grad;
            if i > 0 {
                let dz = pre[i - 1].map(silu_deriv);
                grad.component_mul_assign(&dz);
            }
        }
        let grad_x = grad.rows(0, self.dim).into_owned();
        let grad_c = grad.rows(self.dim, self.dim).into_owned();
        Ok((grad_x, grad_c))
    }

    /// Batched forward pass; inputs and outputs hold one example per column.
    fn forward_batch(&self, inputs: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = inputs.ncols();
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut act = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &cur;
            for j in 0..n {
                let mut col = z.column_mut(j);
                col += &layer.bias;
            }
            if i + 1 < self.layers.len() {
                cur = z.map(silu);
                pre.push(z);
                act.push(cur.clone());
            } else {
                cur = z;
            }
        }
        (cur, pre, act)
    }

    /// Mean weighted squared error of the batch.
    pub fn dsm_loss(&self, batch: &DsmBatch) -> f64 {
        let (out, _, _) = self.forward_batch(&batch.inputs);
        let n = batch.inputs.ncols();
        let mut loss = 0.0;
        for j in 0..n {
            let diff = out.column(j) - batch.targets.column(j);
            loss += batch.weights[j] * diff.norm_squared();
        }
        loss / n as f64
    }

    /// Loss and backpropagated parameter gradients on a fixed batch.
    pub fn dsm_loss_and_grads(&self, batch: &DsmBatch) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
        let n = batch.inputs.ncols();
        let (out, pre, act) = self.forward_batch(&batch.inputs);
        let mut loss = 0.0;
        let mut delta = DMatrix::zeros(self.dim, n);
        for j in 0..n {
            let diff = out.column(j) - batch.targets.column(j);
            loss += batch.weights[j] * diff.norm_squared();
            delta
                .column_mut(j)
                .copy_from(&(diff * (2.0 * batch.weights[j] / n as f64)));
        }
        loss /= n as f64;

        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let upstream_act: &DMatrix<f64> = if i == 0 { &batch.inputs } else { &act[i - 1] };
            let g_w = &delta * upstream_act.transpose();
            let g_b = DVector::from_iterator(
                delta.nrows(),
                (0..delta.nrows()).map(|r| delta.row(r).sum()),
            );
            grads.push((g_w, g_b));
            if i > 0 {
                delta = self.layers[i].weight.transpose() * delta;
                let dz = pre[i - 1].map(silu_deriv);
                delta.component_mul_assign(&dz);
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for v in layer.weight.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in layer.bias.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Serializes to the flat binary weight container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let widths = self.widths();
        for v in [self.dim, self.num_steps, widths.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in &widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        for layer in &self.layers {
            // row-major weight matrix, then bias
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    buf.extend_from_slice(&layer.weight[(r, c)].to_le_bytes());
                }
            }
            for v in layer.bias.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 7];
        file.read_exact(&mut magic)
            .map_err(|_| Error::WeightFormat("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let read_u32 = |f: &mut std::fs::File| -> Result<usize> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)
                .map_err(|_| Error::WeightFormat("truncated header".into()))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let dim = read_u32(&mut file)?;
        let num_steps = read_u32(&mut file)?;
        let n_widths = read_u32(&mut file)?;
        if n_widths < 2 {
            return Err(Error::WeightFormat("need at least two layer widths".into()));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(read_u32(&mut file)?);
        }
        if widths[n_widths - 1] != dim || widths[0] < 2 * dim {
            return Err(Error::WeightFormat("inconsistent layer widths".into()));
        }
        let time_emb = widths[0] - 2 * dim;
        let hidden = &widths[1..n_widths - 1];
        let mut net = Self::new(dim, hidden, time_emb, num_steps)?;
        let read_f64 = |f: &mut std::fs::File| -> Result<f64> {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)
                .map_err(|_| Error::WeightFormat("truncated weights".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        for layer in &mut net.layers {
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    layer.weight[(r, c)] = read_f64(&mut file)?;
                }
            }
            for i in 0..layer.bias.len() {
                layer.bias[i] = read_f64(&mut file)?;
            }
        }
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::WeightFormat("trailing bytes".into()));
        }
        Ok(net)
    }
}

impl ScoreModel for MlpScoreNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x_t: &DVector<f64>, c: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.forward(x_t, c, t)
    }

    fn vjp(
        &self,
        x_t: &DVector<f64>,
        c: &DVector<f64>,
        t: usize,
        cotangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.vjp_inputs(x_t, c, t, cotangent)
    }
}

/// Draws a denoising-score-matching minibatch from the toy world.
pub fn sample_dsm_batch(
    net: &MlpScoreNet,
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    batch_size: usize,
    cond_spread: f64,
    rng: &mut ChaCha8Rng,
) -> DsmBatch {
    let dim = world.dim;
    let in_width = 2 * dim + net.time_emb_width();
    let mut inputs = DMatrix::zeros(in_width, batch_size);
    let mut targets = DMatrix::zeros(dim, batch_size);
    let mut weights = Vec::with_capacity(batch_size);
    for j in 0..batch_size {
        let t = rng.gen_range(1..=schedule.num_steps());
        let abar = schedule.alpha_bar(t).unwrap();
        let c = DVector::from_iterator(
            dim,
            (0..dim).map(|i| world.cond[i] + cond_spread * rng.sample::<f64, _>(StandardNormal)),
        );
        let x0 =
            DVector::from_iterator(dim, (0..dim).map(|i| c[i] + rng.sample::<f64, _>(StandardNormal)));
        let eps = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x_t = &x0 * abar.sqrt() + &eps * (1.0 - abar).sqrt();
        let temb = net.time_features(t);
        for i in 0..dim {
            inputs[(i, j)] = x_t[i];
            inputs[(dim + i, j)] = c[i];
            targets[(i, j)] = -eps[i] / (1.0 - abar).sqrt();
        }
        for i in 0..net.time_emb_width() {
            inputs[(2 * dim + i, j)] = temb[i];
        }
        weights.push(1.0 - abar);
    }
    DsmBatch {
        inputs,
        targets,
        weights,
    }
}

/// Trains the network by denoising score matching with plain fixed-rate
/// SGD. Returns the trained network and the per-iteration loss trace.
pub fn train_dsm(
    net: MlpScoreNet,
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    opts: &TrainOpts,
) -> Result<(MlpScoreNet, Vec<f64>)> {
    if world.dim != net.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            got: world.dim,
        });
    }
    if opts.iterations == 0 {
        return Ok((net, Vec::new()));
    }
    if opts.batch_size == 0 || opts.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(opts.iterations);
    let mut last_finite = f64::NAN;
    for iter in 0..opts.iterations {
        let batch = sample_dsm_batch(&net, world, schedule, opts.batch_size, opts.cond_spread, &mut rng);
        let (loss, grads) = net.dsm_loss_and_grads(&batch);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iter,
                last_loss: last_finite,
            });
        }
        last_finite = loss;
        trace.push(loss);
        for (layer, (g_w, g_b)) in net.layers.iter_mut().zip(&grads) {
            layer.weight -= g_w * opts.learning_rate;
            layer.bias -= g_b * opts.learning_rate;
        }
    }
    Ok((net, trace))
}
