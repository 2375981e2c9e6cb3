//! Self-supervised training over co-located non-overlapping patch pairs.

use super::{simsiam_loss, ArchConfig, MtcNetModel};
use crate::autodiff::optim::OptimizerState;
use crate::autodiff::{backward, Tensor};
use crate::cube::{extract_patches, HsiCube, PatchGrid};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            base_lr: 0.05,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                message: "epochs and batch_size must be >= 1".into(),
            });
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig {
                message: "base_lr must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Stack the selected patch blocks into a [B, 1, C, m, m] batch tensor. The
/// band-major block layout matches the tensor layout directly.
pub(crate) fn patch_batch(cube: &HsiCube, grid: &PatchGrid, indices: &[usize]) -> Result<Tensor> {
    let m = grid.patch_size();
    let c = cube.bands();
    let mut values = Vec::with_capacity(indices.len() * c * m * m);
    for &i in indices {
        values.extend_from_slice(&grid.block(cube, i));
    }
    Tensor::from_vec(vec![indices.len(), 1, c, m, m], values)
}

/// Train a fresh model on co-located patch pairs of a co-registered cube
/// pair. Per epoch the pair order is reshuffled (seeded), batches of
/// `batch_size` run loss/backward/step (the final short batch included), and
/// the pair-weighted epoch-mean loss is recorded. Deterministic for a fixed
/// seed.
pub fn train(
    cube1: &HsiCube,
    cube2: &HsiCube,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<(MtcNetModel, Vec<f64>)> {
    config.validate()?;
    if !cube1.same_dims(cube2) {
        return Err(Error::shape(
            format!("{}x{}x{}", cube1.height(), cube1.width(), cube1.bands()),
            format!("{}x{}x{}", cube2.height(), cube2.width(), cube2.bands()),
        ));
    }
    let grid = extract_patches(cube1, arch.patch_size)?;
    if grid.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let model = MtcNetModel::new(arch, config.seed)?;
    let named = model.params();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut optimizer =
        OptimizerState::new(config.base_lr, config.epochs, config.momentum, &params)?;
    let mut shuffle_rng = Rng::new(config.seed).fork(0x7472_6169);

    let n = grid.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..config.epochs {
        if config.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        // The final short batch is kept; a trailing singleton folds into the
        // previous batch because feature batch normalization needs at least
        // two samples.
        let mut bounds: Vec<usize> = (0..n).step_by(config.batch_size).collect();
        bounds.push(n);
        if bounds.len() > 2 && n - bounds[bounds.len() - 2] == 1 {
            bounds.remove(bounds.len() - 2);
        }
        let mut weighted_loss = 0.0;
        for window in bounds.windows(2) {
            let chunk = &order[window[0]..window[1]];
            let x1 = patch_batch(cube1, &grid, chunk)?;
            let x2 = patch_batch(cube2, &grid, chunk)?;
            let loss = simsiam_loss(&model, &x1, &x2, crate::autodiff::Mode::Train)?;
            backward(&loss)?;
            optimizer.sgd_step(&params)?;
            weighted_loss += loss.item() * chunk.len() as f64;
        }
        history.push(weighted_loss / n as f64);
        optimizer.advance_epoch()?;
    }
    Ok((model, history))
}

/// Loss history as CSV: header plus one `epoch,mean_loss` row per epoch.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", epoch, loss));
    }
    out
}
