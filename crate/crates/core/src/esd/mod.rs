//! Equivariant spherical deconvolution network.
//!
//! Diffusion signals are normalized by their b0 mean, resampled onto the
//! Healpix input grid (one channel per shell, plus optionally the baseline
//! CSD fODF) and passed through a spherical U-Net whose head emits one
//! nonnegative field per tissue. The WM field is projected onto even SH up
//! to the fODF degree; GM and CSF take the maximum of their fields. The
//! network is trained without labels by minimizing
//!
//! `‖S − F∗R‖² + λ Σ ln(1 + f²/(2σ_c²)) + λ_neg Σ min(f, 0)²`
//!
//! per voxel, where `f` is the projected WM fODF on the input grid.

mod net;
mod train;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use net::{HeadActivation, UNet};
pub use train::{train, train_with, EpochRecord, TrainReport};

use crate::autodiff::{AdamState, BnStats, FixedMatrix, ParamStore, Tape, Tensor, Var};
use crate::csd::{csd_solve, fodf_values, CsdConfig};
use crate::error::{Error, Result};
use crate::harmonics::{default_fit_degree, Resampler, ShBasis, ShFitter, DEFAULT_RESAMPLE_TIKHONOV, FODF_DEGREE};
use crate::signal_model::{FodfField, ForwardModel, ResponseSet, Tissue, TissueFodf, VoxelBatch, BVAL_TOL};
use crate::sphere_grid::SphericalGrid;

fn d_nside() -> usize {
    8
}
fn d_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn d_order() -> usize {
    4
}
fn d_tissues() -> usize {
    1
}
fn d_degree() -> usize {
    FODF_DEGREE
}
fn d_lambda() -> f64 {
    1e-4
}
fn d_sigma() -> f64 {
    1e-2
}
fn d_nonneg() -> f64 {
    1.0
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    3e-3
}
fn d_factor() -> f64 {
    0.5
}
fn d_patience() -> usize {
    5
}
fn d_epochs() -> usize {
    30
}

/// Network, loss and training settings.
///
/// `depth` is implied by the length of `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsdConfig {
    #[serde(default = "d_nside")]
    pub nside_in: usize,
    #[serde(default = "d_channels")]
    pub channels: Vec<usize>,
    /// Highest Laplacian power `P` of each graph filter.
    #[serde(default = "d_order")]
    pub polynomial_order: usize,
    #[serde(default = "d_tissues")]
    pub tissues: usize,
    #[serde(default = "d_degree")]
    pub fodf_degree: usize,
    #[serde(default = "d_lambda")]
    pub lambda_sparsity: f64,
    #[serde(default = "d_sigma")]
    pub sigma_cauchy: f64,
    #[serde(default = "d_nonneg")]
    pub lambda_nonneg: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d_patience")]
    pub plateau_patience: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Adds the baseline CSD WM fODF as an extra input channel.
    #[serde(default)]
    pub use_csd_input: bool,
    /// SH degree used to resample each shell onto the input grid; defaults
    /// to the largest even degree the shell's gradient count supports.
    #[serde(default)]
    pub input_degree: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EsdConfig {
    fn default() -> Self {
        EsdConfig {
            nside_in: d_nside(),
            channels: d_channels(),
            polynomial_order: d_order(),
            tissues: d_tissues(),
            fodf_degree: d_degree(),
            lambda_sparsity: d_lambda(),
            sigma_cauchy: d_sigma(),
            lambda_nonneg: d_nonneg(),
            batch_size: d_batch(),
            lr: d_lr(),
            plateau_factor: d_factor(),
            plateau_patience: d_patience(),
            max_epochs: d_epochs(),
            use_csd_input: false,
            input_degree: None,
            seed: 0,
        }
    }
}

impl EsdConfig {
    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.nside_in.is_power_of_two() || self.nside_in > 64 {
            return bad(format!("esd.nside_in must be a power of two up to 64, got {}", self.nside_in));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("esd.channels must be nonempty and positive, got {:?}", self.channels));
        }
        if self.nside_in >> (self.depth() - 1) == 0 {
            return bad(format!(
                "esd.channels: depth {} is too large for nside_in {}",
                self.depth(),
                self.nside_in
            ));
        }
        if !(1..=3).contains(&self.tissues) {
            return bad(format!("esd.tissues must be 1, 2 or 3, got {}", self.tissues));
        }
        if self.fodf_degree % 2 != 0 || self.fodf_degree > 20 {
            return bad(format!("esd.fodf_degree must be even and at most 20, got {}", self.fodf_degree));
        }
        if crate::harmonics::coefficient_count(self.fodf_degree) > 12 * self.nside_in * self.nside_in {
            return bad(format!(
                "esd.fodf_degree {} has more coefficients than the nside {} grid has vertices",
                self.fodf_degree, self.nside_in
            ));
        }
        if !(self.lambda_sparsity >= 0.0 && self.lambda_sparsity.is_finite()) {
            return bad(format!("esd.lambda_sparsity must be nonnegative, got {}", self.lambda_sparsity));
        }
        if !(self.sigma_cauchy > 0.0 && self.sigma_cauchy.is_finite()) {
            return bad(format!("esd.sigma_cauchy must be positive, got {}", self.sigma_cauchy));
        }
        if !(self.lambda_nonneg >= 0.0 && self.lambda_nonneg.is_finite()) {
            return bad(format!("esd.lambda_nonneg must be nonnegative, got {}", self.lambda_nonneg));
        }
        if self.batch_size == 0 {
            return bad("esd.batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("esd.lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("esd.plateau_factor must be in (0, 1], got {}", self.plateau_factor));
        }
        if let Some(d) = self.input_degree {
            if d % 2 != 0 || d > 20 {
                return bad(format!("esd.input_degree must be even and at most 20, got {d}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Loss value with its weighted parts; `total` is read from the tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    /// `λ · Σ ln(1 + f²/(2σ_c²))`.
    pub sparsity: f64,
    /// `λ_neg · Σ min(f, 0)²`.
    pub nonneg: f64,
}

impl LossTerms {
    fn scaled(self, s: f64) -> Self {
        LossTerms {
            total: self.total * s,
            reconstruction: self.reconstruction * s,
            sparsity: self.sparsity * s,
            nonneg: self.nonneg * s,
        }
    }

    fn add(self, o: Self) -> Self {
        LossTerms {
            total: self.total + o.total,
            reconstruction: self.reconstruction + o.reconstruction,
            sparsity: self.sparsity + o.sparsity,
            nonneg: self.nonneg + o.nonneg,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("reconstruction", self.reconstruction),
            ("sparsity", self.sparsity),
            ("nonneg", self.nonneg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Projection of head outputs onto fODF coefficients.
#[derive(Debug, Clone)]
pub struct Heads {
    basis: ShBasis,
    // N × L least-squares fit
    fit: Arc<FixedMatrix>,
    // L × N evaluation
    eval: Arc<FixedMatrix>,
}

impl Heads {
    pub fn new(grid: &SphericalGrid, l_max: usize) -> Result<Self> {
        let basis = ShBasis::new(l_max)?;
        let fitter = ShFitter::new(basis, grid.vertices(), 0.0)?;
        Ok(Heads {
            basis,
            fit: Arc::new(FixedMatrix::from_dmatrix(&fitter.operator().transpose())),
            eval: Arc::new(FixedMatrix::from_dmatrix(fitter.design().matrix())),
        })
    }

    pub fn basis(&self) -> ShBasis {
        self.basis
    }

    /// WM: SH fit of channel 0; isotropic tissues: maximum of their channel.
    pub fn to_fodf(&self, outputs: &Tensor, tissues: &[Tissue]) -> Result<FodfField> {
        let (b, t, n) = match outputs.shape() {
            [b, t, n] => (*b, *t, *n),
            s => return Err(Error::invalid(format!("head outputs must be [V, T, N], got {s:?}"))),
        };
        if t != tissues.len() || n != self.fit.rows {
            return Err(Error::invalid(format!(
                "head outputs {:?} do not match {} tissues on {} vertices",
                outputs.shape(),
                tissues.len(),
                self.fit.rows
            )));
        }
        let l = self.basis.len();
        let o = outputs.data();
        let mut parts = Vec::with_capacity(t);
        for (ti, &tissue) in tissues.iter().enumerate() {
            let mut coeffs = Vec::with_capacity(b * if ti == 0 { l } else { 1 });
            for v in 0..b {
                let ch = &o[(v * t + ti) * n..(v * t + ti + 1) * n];
                if ti == 0 {
                    let mut c = vec![0.0; l];
                    crate::autodiff::gemm::gemm(
                        1,
                        n,
                        l,
                        1.0,
                        crate::autodiff::gemm::rm(ch, n),
                        crate::autodiff::gemm::rm(&self.fit.data, l),
                        0.0,
                        &mut c,
                        l,
                        1,
                    );
                    coeffs.extend(c);
                } else {
                    coeffs.push(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
            }
            parts.push(TissueFodf {
                tissue,
                basis: if ti == 0 { self.basis } else { ShBasis::new(0)? },
                coeffs,
            });
        }
        FodfField::from_parts(b, parts)
    }

    /// Records the same projection on a tape; returns the stacked unknowns
    /// `[V, L + T − 1]` and the WM fODF values on the grid `[V, N]`.
    fn on_tape(&self, tape: &mut Tape, outputs: Var, n_tissues: usize) -> Result<(Var, Var)> {
        let ch0 = tape.channel(outputs, 0)?;
        let wm = tape.matmul_fixed(ch0, &self.fit)?;
        let values = tape.matmul_fixed(wm, &self.eval)?;
        let mut cols = vec![wm];
        for t in 1..n_tissues {
            let ch = tape.channel(outputs, t)?;
            cols.push(tape.max_last(ch)?);
        }
        let stacked = if cols.len() == 1 { wm } else { tape.concat_cols(&cols)? };
        Ok((stacked, values))
    }
}

/// Network inputs and reconstruction targets of one voxel batch.
#[derive(Debug, Clone)]
pub struct Prepared {
    n_voxels: usize,
    // V × C_in × N
    inputs: Vec<f64>,
    // V × rows, b0-normalized samples in forward-model order
    targets: Vec<f64>,
    // unknowns × rows
    forward_t: Arc<FixedMatrix>,
}

impl Prepared {
    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn n_rows(&self) -> usize {
        self.forward_t.cols
    }

    fn gather(&self, voxels: &[usize], per_voxel: usize, buf: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(voxels.len() * per_voxel);
        for &v in voxels {
            out.extend_from_slice(&buf[v * per_voxel..(v + 1) * per_voxel]);
        }
        out
    }
}

/// Serializable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct EsdCheckpoint {
    pub config: EsdConfig,
    pub config_hash: String,
    pub shells: Vec<f64>,
    pub responses: ResponseSet,
    pub csd: CsdConfig,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub params: ParamStore,
    pub bn: Vec<BnStats>,
    pub adam: AdamState,
}

/// Network plus everything needed to turn signals into fODFs.
#[derive(Debug, Clone)]
pub struct EsdModel {
    config: EsdConfig,
    net: UNet,
    heads: Heads,
    tissues: Vec<Tissue>,
    shells: Vec<f64>,
    responses: ResponseSet,
    csd: CsdConfig,
}

const INFER_CHUNK: usize = 64;

impl EsdModel {
    /// Builds an untrained model for a shell set. `responses` must cover the
    /// configured tissues; `csd` drives the optional CSD input channel.
    pub fn new(config: EsdConfig, shells: &[f64], responses: &ResponseSet, csd: CsdConfig) -> Result<Self> {
        config.validate()?;
        if shells.is_empty() {
            return Err(Error::invalid("ESD needs at least one diffusion-weighted shell"));
        }
        if config.use_csd_input {
            csd.validate()?;
        }
        let responses = responses.truncated(config.tissues)?;
        let tissues = responses.tissues();
        let activation = if config.tissues > 1 {
            HeadActivation::Softplus
        } else {
            HeadActivation::Relu
        };
        let in_channels = shells.len() + usize::from(config.use_csd_input);
        let net = UNet::new(
            config.nside_in,
            &config.channels,
            config.polynomial_order,
            in_channels,
            config.tissues,
            activation,
            config.seed,
        )?;
        let heads = Heads::new(net.grid(), config.fodf_degree)?;
        Ok(EsdModel {
            config,
            net,
            heads,
            tissues,
            shells: shells.to_vec(),
            responses,
            csd,
        })
    }

    pub fn from_checkpoint(ck: &EsdCheckpoint) -> Result<Self> {
        if ck.config.hash() != ck.config_hash {
            return Err(Error::invalid("checkpoint config hash does not match its config"));
        }
        let mut model = EsdModel::new(ck.config.clone(), &ck.shells, &ck.responses, ck.csd.clone())?;
        model.net.load_state(ck.params.clone(), ck.bn.clone())?;
        Ok(model)
    }

    pub fn checkpoint(&self, epoch: usize, best_val_loss: f64, adam: AdamState) -> EsdCheckpoint {
        EsdCheckpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            shells: self.shells.clone(),
            responses: self.responses.clone(),
            csd: self.csd.clone(),
            epoch,
            best_val_loss,
            params: self.net.params().clone(),
            bn: self.net.bn_stats().to_vec(),
            adam,
        }
    }

    pub fn config(&self) -> &EsdConfig {
        &self.config
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut UNet {
        &mut self.net
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn tissues(&self) -> &[Tissue] {
        &self.tissues
    }

    pub fn shells(&self) -> &[f64] {
        &self.shells
    }

    pub fn grid(&self) -> &SphericalGrid {
        self.net.grid()
    }

    fn check_shells(&self, batch: &VoxelBatch) -> Result<()> {
        let b = batch.table().bvals();
        let same = b.len() == self.shells.len() && b.iter().zip(&self.shells).all(|(x, y)| (x - y).abs() <= BVAL_TOL);
        if same {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "shell mismatch: model was built for b = {:?}, data has b = {b:?}",
                self.shells
            )))
        }
    }

    /// Baseline CSD WM fODF values on the input grid, `V × N`.
    pub fn csd_channel(&self, batch: &VoxelBatch) -> Result<Vec<f64>> {
        let res = csd_solve(batch, &self.responses, &self.tissues, &self.csd)?;
        fodf_values(&res.field, self.grid().vertices())
    }

    /// Resampled network input `V × C_in × N`.
    pub fn inputs(&self, batch: &VoxelBatch) -> Result<Vec<f64>> {
        self.check_shells(batch)?;
        let normalized;
        let batch = if batch.is_normalized() {
            batch
        } else {
            normalized = batch.normalized_by_b0();
            &normalized
        };
        let grid = self.grid();
        let n = grid.len();
        let resamplers = batch
            .table()
            .shells()
            .iter()
            .map(|s| {
                let degree = self.config.input_degree.unwrap_or_else(|| default_fit_degree(s.directions.len()));
                Resampler::new(&s.directions, grid.vertices(), degree, DEFAULT_RESAMPLE_TIKHONOV)
            })
            .collect::<Result<Vec<_>>>()?;
        let csd = if self.config.use_csd_input {
            Some(self.csd_channel(batch)?)
        } else {
            None
        };
        let c_in = self.net.in_channels();
        let mut inputs = vec![0.0; batch.n_voxels() * c_in * n];
        inputs.par_chunks_mut(c_in * n).enumerate().for_each(|(v, out)| {
            for (k, r) in resamplers.iter().enumerate() {
                r.apply_into(batch.shell_samples(v, k), &mut out[k * n..(k + 1) * n]);
            }
            if let Some(c) = &csd {
                out[(c_in - 1) * n..].copy_from_slice(&c[v * n..(v + 1) * n]);
            }
        });
        Ok(inputs)
    }

    fn forward_model(&self, batch: &VoxelBatch) -> Result<ForwardModel> {
        self.responses.check_covers(batch.table())?;
        if self.tissues.len() > 1 {
            ForwardModel::with_b0(&self.responses, &self.tissues, self.config.fodf_degree, batch.table())
        } else {
            ForwardModel::new(&self.responses, &self.tissues, self.config.fodf_degree, batch.table())
        }
    }

    /// Inputs, targets and forward operator for training or loss evaluation.
    pub fn prepare(&self, batch: &VoxelBatch) -> Result<Prepared> {
        let inputs = self.inputs(batch)?;
        let model = self.forward_model(batch)?;
        let normalized = if batch.is_normalized() {
            batch.clone()
        } else {
            batch.normalized_by_b0()
        };
        let skip = batch.table().b0_count() - model.b0_rows();
        let mut targets = Vec::with_capacity(batch.n_voxels() * model.n_rows());
        for v in 0..batch.n_voxels() {
            targets.extend_from_slice(&normalized.row(v)[skip..]);
        }
        Ok(Prepared {
            n_voxels: batch.n_voxels(),
            inputs,
            targets,
            forward_t: Arc::new(FixedMatrix::from_dmatrix(&model.matrix().transpose())),
        })
    }

    /// Records the loss of `outputs` against `targets`; returns the total and
    /// the unweighted `(reconstruction, cauchy, negativity)` nodes, all
    /// averaged over voxels.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        outputs: Var,
        targets: &[f64],
        forward_t: &Arc<FixedMatrix>,
    ) -> Result<(Var, [Var; 3])> {
        let b = tape.value(outputs).shape()[0];
        let inv = 1.0 / b as f64;
        let (stacked, values) = self.heads.on_tape(tape, outputs, self.tissues.len())?;
        let pred = tape.matmul_fixed(stacked, forward_t)?;
        let resid = tape.sub_const(pred, targets)?;
        let rec = tape.sum_squares(resid);
        let rec = tape.scale(rec, inv);
        let cauchy = tape.cauchy_sum(values, self.config.sigma_cauchy)?;
        let cauchy = tape.scale(cauchy, inv);
        let neg = tape.neg_sum_squares(values);
        let neg = tape.scale(neg, inv);
        let ws = tape.scale(cauchy, self.config.lambda_sparsity);
        let wn = tape.scale(neg, self.config.lambda_nonneg);
        let t = tape.add(rec, ws)?;
        let total = tape.add(t, wn)?;
        Ok((total, [rec, cauchy, neg]))
    }

    fn read_terms(&self, tape: &Tape, total: Var, terms: [Var; 3]) -> LossTerms {
        LossTerms {
            total: tape.value(total).item(),
            reconstruction: tape.value(terms[0]).item(),
            sparsity: self.config.lambda_sparsity * tape.value(terms[1]).item(),
            nonneg: self.config.lambda_nonneg * tape.value(terms[2]).item(),
        }
    }

    /// Loss terms and parameter gradients on voxels `chunk` of `data`, with
    /// the batch-norm statistics after the forward pass.
    pub fn gradients(&self, data: &Prepared, chunk: &[usize], train: bool) -> Result<(LossTerms, Vec<Vec<f64>>, Vec<BnStats>)> {
        let n = self.grid().len();
        let c_in = self.net.in_channels();
        let rows = data.n_rows();
        let mut tape = Tape::new();
        let p = self.net.param_vars(&mut tape, true);
        let x = tape.constant(Tensor::new(vec![chunk.len(), c_in, n], data.gather(chunk, c_in * n, &data.inputs))?);
        let mut bn = self.net.bn_stats().to_vec();
        let out = self.net.forward(&mut tape, x, &p, &mut bn, train)?;
        let (total, terms) = self.loss_on_tape(&mut tape, out, &data.gather(chunk, rows, &data.targets), &data.forward_t)?;
        let values = self.read_terms(&tape, total, terms);
        if let Some(term) = values.first_non_finite() {
            return Err(Error::Numerical(format!("{term} loss is not finite")));
        }
        tape.backward(total)?;
        let grads = p
            .iter()
            .zip(self.net.params().tensors())
            .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((values, grads, bn))
    }

    /// Eval-mode loss averaged over every voxel of `data`.
    pub fn evaluate_loss(&self, data: &Prepared) -> Result<LossTerms> {
        let n = self.grid().len();
        let c_in = self.net.in_channels();
        let rows = data.n_rows();
        let all: Vec<usize> = (0..data.n_voxels).collect();
        let parts = all
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let p = self.net.param_vars(&mut tape, false);
                let x = tape.constant(Tensor::new(vec![chunk.len(), c_in, n], data.gather(chunk, c_in * n, &data.inputs))?);
                let mut bn = self.net.bn_stats().to_vec();
                let out = self.net.forward(&mut tape, x, &p, &mut bn, false)?;
                let (total, terms) = self.loss_on_tape(&mut tape, out, &data.gather(chunk, rows, &data.targets), &data.forward_t)?;
                Ok(self.read_terms(&tape, total, terms).scaled(chunk.len() as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        let sum = parts.into_iter().fold(LossTerms::default(), LossTerms::add);
        Ok(sum.scaled(1.0 / data.n_voxels.max(1) as f64))
    }

    /// Eval-mode head outputs `[V, T, N]` for prepared inputs.
    pub fn outputs(&self, inputs: &[f64]) -> Result<Tensor> {
        let n = self.grid().len();
        let c_in = self.net.in_channels();
        if inputs.len() % (c_in * n) != 0 {
            return Err(Error::invalid(format!("input length {} is not a multiple of {c_in}×{n}", inputs.len())));
        }
        let v = inputs.len() / (c_in * n);
        let chunks = inputs
            .par_chunks(INFER_CHUNK * c_in * n)
            .map(|c| self.net.predict(c))
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![v, self.tissues.len(), n], data)
    }

    /// Resample, run the network in eval mode and project onto fODFs.
    pub fn infer(&self, batch: &VoxelBatch) -> Result<FodfField> {
        let inputs = self.inputs(batch)?;
        let out = self.outputs(&inputs)?;
        self.heads.to_fodf(&out, &self.tissues)
    }
}

#[cfg(test)]
mod tests;
