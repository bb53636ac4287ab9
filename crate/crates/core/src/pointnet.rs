//! Point-set branch: a shared per-point MLP followed by a max over points.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{self, Init};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const PREFIX: &str = "pointnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointNetConfig {
    pub num_points: usize,
    /// Hidden widths of the shared MLP; the final layer has `feature_dim` units.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Predict a 3x3 matrix applied to the points before the shared MLP.
    #[serde(default)]
    pub input_transform: bool,
    #[serde(default = "default_tnet_point")]
    pub tnet_point: Vec<usize>,
    #[serde(default = "default_tnet_head")]
    pub tnet_head: Vec<usize>,
}

fn default_tnet_point() -> Vec<usize> {
    vec![64, 128, 1024]
}

fn default_tnet_head() -> Vec<usize> {
    vec![512, 256]
}

impl Default for PointNetConfig {
    fn default() -> Self {
        Self {
            num_points: 1024,
            hidden: vec![64, 64, 128],
            feature_dim: 1024,
            input_transform: false,
            tnet_point: default_tnet_point(),
            tnet_head: default_tnet_head(),
        }
    }
}

impl PointNetConfig {
    pub fn toy() -> Self {
        Self {
            hidden: vec![16, 16, 32],
            tnet_point: vec![16, 32, 256],
            tnet_head: vec![128, 64],
            ..Self::default()
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

pub fn init_pointnet<T: Real>(cfg: &PointNetConfig, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut init = Init { rng };
    let w = cfg.widths();
    for i in 0..w.len() - 1 {
        init.linear(&mut store, &format!("{PREFIX}/fc{i}"), w[i + 1], w[i], false);
        init.batch_norm(&mut store, &format!("{PREFIX}/bn{i}"), w[i + 1]);
    }
    if cfg.input_transform {
        let mut prev = 3;
        for (i, &c) in cfg.tnet_point.iter().enumerate() {
            init.linear(&mut store, &format!("{PREFIX}/tnet/fc{i}"), c, prev, false);
            init.batch_norm(&mut store, &format!("{PREFIX}/tnet/bn{i}"), c);
            prev = c;
        }
        for (i, &c) in cfg.tnet_head.iter().enumerate() {
            init.linear(&mut store, &format!("{PREFIX}/tnet/head{i}"), c, prev, true);
            prev = c;
        }
        // a zero last layer makes the predicted transform start at identity
        store.insert(format!("{PREFIX}/tnet/out/weight"), Tensor::zeros(vec![9, prev]));
        store.insert(format!("{PREFIX}/tnet/out/bias"), Tensor::zeros(vec![9]));
    }
    store
}

/// Shared layers on `[B*N, C]` rows, then max over the `N` points of each sample.
#[allow(clippy::too_many_arguments)]
fn shared_mlp_max<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    rows: Var,
    widths: &[usize],
    batch: usize,
    n: usize,
    train: bool,
) -> Result<Var> {
    let mut h = rows;
    for i in 0..widths.len() {
        h = nn::linear(tape, store, &format!("{prefix}/fc{i}"), h)?;
        h = nn::batch_norm(tape, store, &format!("{prefix}/bn{i}"), h, train)?;
        h = tape.relu(h)?;
    }
    let h = tape.reshape(h, &[batch, n, *widths.last().expect("nonempty")])?;
    tape.max_reduce(h, 1)
}

/// Global feature `[B, feature_dim]` of points `[B, N, 3]`.
///
/// Batch statistics are taken over every point of the batch. The post-max
/// layers of the input transform carry no normalization, so that batches of
/// one stay well defined.
pub fn pointnet_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &PointNetConfig,
    points: Var,
    train: bool,
) -> Result<Var> {
    let s = tape.shape(points).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return shape_err("pointnet", format!("expects [B, N, 3], got {s:?}"));
    }
    let (b, n) = (s[0], s[1]);
    if n != cfg.num_points {
        return shape_err("pointnet", format!("expects {} points, got {n}", cfg.num_points));
    }
    let mut pts = points;
    if cfg.input_transform {
        let rows = tape.reshape(points, &[b * n, 3])?;
        let mut g = shared_mlp_max(tape, store, &format!("{PREFIX}/tnet"), rows, &cfg.tnet_point, b, n, train)?;
        for i in 0..cfg.tnet_head.len() {
            g = nn::linear(tape, store, &format!("{PREFIX}/tnet/head{i}"), g)?;
            g = tape.relu(g)?;
        }
        let delta = nn::linear(tape, store, &format!("{PREFIX}/tnet/out"), g)?;
        let eye = Tensor::from_f64(vec![b, 9], &(0..b).flat_map(|_| [1., 0., 0., 0., 1., 0., 0., 0., 1.]).collect::<Vec<_>>())?;
        let eye = tape.constant(eye);
        let m = tape.add(delta, eye)?;
        let m = tape.reshape(m, &[b, 3, 3])?;
        pts = tape.batch_matmul(points, m)?;
    }
    let rows = tape.reshape(pts, &[b * n, 3])?;
    let widths = &cfg.widths()[1..];
    shared_mlp_max(tape, store, PREFIX, rows, widths, b, n, train)
}

/// Stack point sets `[N, 3]` into a `[B, N, 3]` tensor.
pub fn points_tensor<T: Real>(clouds: &[&[[f64; 3]]]) -> Result<Tensor<T>> {
    let n = clouds.first().map_or(0, |c| c.len());
    if clouds.iter().any(|c| c.len() != n) || n == 0 {
        return shape_err("pointnet", "point sets in a batch must share a nonzero size");
    }
    let data: Vec<f64> = clouds.iter().flat_map(|c| c.iter().flatten().copied()).collect();
    Tensor::from_f64(vec![clouds.len(), n, 3], &data)
}
