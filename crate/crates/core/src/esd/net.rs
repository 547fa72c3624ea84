//! Spherical U-Net built from Healpix graph convolutions.

use std::sync::Arc;

use crate::autodiff::{init_uniform, scaled_laplacian, BnStats, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::sphere_grid::{PoolingMap, SphericalGrid};

/// Output activation of the head layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadActivation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone)]
struct Layer {
    level: usize,
    weight: usize,
    // (gamma, beta, running-stats slot)
    norm: Option<(usize, usize, usize)>,
    bias: Option<usize>,
}

/// Layer structure, graphs and parameters of the U-Net.
///
/// Each encoder level applies two `conv → batchnorm → ReLU` blocks and
/// max-pools to the next coarser grid; the decoder unpools, concatenates
/// the matching encoder activation and applies two more blocks. The head
/// is a biased convolution to one channel per tissue.
#[derive(Debug, Clone)]
pub struct UNet {
    grids: Vec<SphericalGrid>,
    laplacians: Vec<Arc<CsrMatrix>>,
    pools: Vec<PoolingMap>,
    encoder: Vec<[Layer; 2]>,
    decoder: Vec<[Layer; 2]>,
    head: Layer,
    activation: HeadActivation,
    params: ParamStore,
    bn: Vec<BnStats>,
    in_channels: usize,
    out_channels: usize,
}

struct Builder {
    params: ParamStore,
    bn: Vec<BnStats>,
    order: usize,
    seed: u64,
}

impl Builder {
    fn conv(&mut self, name: &str, level: usize, c_in: usize, c_out: usize, norm: bool) -> Layer {
        let fan = self.order * c_in + c_out;
        let w = init_uniform(vec![self.order, c_in, c_out], fan, self.seed, &format!("init/{name}"));
        let weight = self.params.add(format!("{name}.weight"), w);
        let norm = norm.then(|| {
            let g = self
                .params
                .add(format!("{name}.gamma"), Tensor::new(vec![c_out], vec![1.0; c_out]).unwrap());
            let b = self.params.add(format!("{name}.beta"), Tensor::zeros(vec![c_out]));
            self.bn.push(BnStats::new(c_out));
            (g, b, self.bn.len() - 1)
        });
        let bias = norm.is_none().then(|| self.params.add(format!("{name}.bias"), Tensor::zeros(vec![c_out])));
        Layer {
            level,
            weight,
            norm,
            bias,
        }
    }
}

impl UNet {
    /// Builds the network and draws its initial weights from `seed`.
    ///
    /// Level `l` runs on the grid of side `nside_in / 2^l`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nside_in: usize,
        channels: &[usize],
        polynomial_order: usize,
        in_channels: usize,
        out_channels: usize,
        activation: HeadActivation,
        seed: u64,
    ) -> Result<Self> {
        let depth = channels.len();
        if depth == 0 || in_channels == 0 || out_channels == 0 || channels.contains(&0) {
            return Err(Error::invalid("network needs at least one level and nonzero channel counts"));
        }
        if !nside_in.is_power_of_two() || nside_in >> (depth - 1) == 0 {
            return Err(Error::invalid(format!(
                "depth {depth} is too large for nside_in {nside_in}: every level needs an integer nside ≥ 1"
            )));
        }
        let grids = (0..depth)
            .map(|l| SphericalGrid::new(nside_in >> l))
            .collect::<Result<Vec<_>>>()?;
        let laplacians = grids.iter().map(scaled_laplacian).collect();
        let pools = grids
            .windows(2)
            .map(|w| PoolingMap::new(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            order: polynomial_order + 1,
            seed,
        };
        let mut encoder = Vec::with_capacity(depth);
        let mut c_prev = in_channels;
        for (l, &c) in channels.iter().enumerate() {
            encoder.push([
                b.conv(&format!("enc{l}.conv0"), l, c_prev, c, true),
                b.conv(&format!("enc{l}.conv1"), l, c, c, true),
            ]);
            c_prev = c;
        }
        let mut decoder = Vec::with_capacity(depth - 1);
        for l in (0..depth - 1).rev() {
            let c = channels[l];
            decoder.push([
                b.conv(&format!("dec{l}.conv0"), l, channels[l + 1] + c, c, true),
                b.conv(&format!("dec{l}.conv1"), l, c, c, true),
            ]);
        }
        let head = b.conv("head", 0, channels[0], out_channels, false);
        Ok(UNet {
            grids,
            laplacians,
            pools,
            encoder,
            decoder,
            head,
            activation,
            params: b.params,
            bn: b.bn,
            in_channels,
            out_channels,
        })
    }

    /// The input-resolution grid.
    pub fn grid(&self) -> &SphericalGrid {
        &self.grids[0]
    }

    pub fn grids(&self) -> &[SphericalGrid] {
        &self.grids
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn activation(&self) -> HeadActivation {
        self.activation
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    /// Replaces parameters and running statistics, checking shapes.
    pub fn load_state(&mut self, params: ParamStore, bn: Vec<BnStats>) -> Result<()> {
        let same_params = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        let same_bn = bn.len() == self.bn.len()
            && bn
                .iter()
                .zip(&self.bn)
                .all(|(a, b)| a.mean.len() == b.mean.len() && a.var.len() == b.var.len());
        if !same_params || !same_bn {
            return Err(Error::invalid("stored parameters do not match the network architecture"));
        }
        self.params = params;
        self.bn = bn;
        Ok(())
    }

    pub fn set_bn_stats(&mut self, bn: Vec<BnStats>) -> Result<()> {
        if bn.len() != self.bn.len() || bn.iter().zip(&self.bn).any(|(a, b)| a.mean.len() != b.mean.len()) {
            return Err(Error::invalid("running statistics do not match the network"));
        }
        self.bn = bn;
        Ok(())
    }

    /// Puts every parameter on the tape.
    pub fn param_vars(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    fn apply(&self, tape: &mut Tape, layer: &Layer, x: Var, p: &[Var], bn: &mut [BnStats], train: bool) -> Result<Var> {
        let y = tape.graph_conv(x, p[layer.weight], &self.laplacians[layer.level])?;
        match (layer.norm, layer.bias) {
            (Some((g, b, s)), _) => {
                let y = tape.batchnorm(y, p[g], p[b], &mut bn[s], train)?;
                Ok(tape.relu(y))
            }
            (None, Some(b)) => tape.add_bias(y, p[b]),
            (None, None) => Ok(y),
        }
    }

    /// Maps `[B, in_channels, N]` to nonnegative `[B, out_channels, N]`.
    ///
    /// `bn` receives running-statistic updates in train mode.
    pub fn forward(&self, tape: &mut Tape, input: Var, p: &[Var], bn: &mut [BnStats], train: bool) -> Result<Var> {
        let depth = self.encoder.len();
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for (l, pair) in self.encoder.iter().enumerate() {
            for layer in pair {
                x = self.apply(tape, layer, x, p, bn, train)?;
            }
            if l + 1 < depth {
                skips.push(x);
                x = tape.maxpool(x, &self.pools[l])?;
            }
        }
        for pair in &self.decoder {
            let l = pair[0].level;
            let up = tape.unpool(x, &self.pools[l])?;
            x = tape.concat_channels(up, skips[l])?;
            for layer in pair {
                x = self.apply(tape, layer, x, p, bn, train)?;
            }
        }
        let y = self.apply(tape, &self.head, x, p, bn, train)?;
        Ok(match self.activation {
            HeadActivation::Relu => tape.relu(y),
            HeadActivation::Softplus => tape.softplus(y),
        })
    }

    /// Eval-mode forward pass on raw values, `[B, in_channels, N]` row-major.
    pub fn predict(&self, input: &[f64]) -> Result<Tensor> {
        let n = self.grid().len();
        if input.len() % (self.in_channels * n) != 0 {
            return Err(Error::invalid(format!(
                "input of {} values is not a multiple of {} channels × {n} vertices",
                input.len(),
                self.in_channels
            )));
        }
        let b = input.len() / (self.in_channels * n);
        let mut tape = Tape::new();
        let p = self.param_vars(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![b, self.in_channels, n], input.to_vec())?);
        let mut bn = self.bn.clone();
        let y = self.forward(&mut tape, x, &p, &mut bn, false)?;
        Ok(tape.value(y).clone())
    }
}
