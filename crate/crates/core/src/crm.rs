//! Complementary Reconstruction Module: one transformer block stack per
//! ordered spectrum pair predicting the target stream's tokens from the
//! source stream's, a token-level reconstruction loss summed over all six
//! pairs, and the missing-spectrum substitution used at evaluation time.

use crate::config::{CrmConfig, ReconLoss};
use crate::data::Spectrum;
use crate::tensor::{Init, ParamStore, Result, Scalar, Tape, TensorError, Var};
use crate::vit::TransformerBlock;

/// The six ordered (source, target) pairs, fixed order.
pub const PAIRS: [(Spectrum, Spectrum); 6] = [
    (Spectrum::R, Spectrum::N),
    (Spectrum::R, Spectrum::T),
    (Spectrum::N, Spectrum::R),
    (Spectrum::N, Spectrum::T),
    (Spectrum::T, Spectrum::R),
    (Spectrum::T, Spectrum::N),
];

fn pair_index(source: Spectrum, target: Spectrum) -> Option<usize> {
    PAIRS.iter().position(|&(s, t)| s == source && t == target)
}

/// Cross-spectrum reconstructions keyed by (source, target), same order as
/// [`PAIRS`].
pub struct ReconstructionSet {
    pub recons: [Var; 6],
}

impl ReconstructionSet {
    pub fn get(&self, source: Spectrum, target: Spectrum) -> Option<Var> {
        pair_index(source, target).map(|i| self.recons[i])
    }
}

pub struct Crm {
    pub cfg: CrmConfig,
    /// blocks[pair] is that ordered pair's TransRe stack.
    blocks: Vec<Vec<TransformerBlock>>,
}

impl Crm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        cfg: &CrmConfig,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        let blocks = PAIRS
            .iter()
            .map(|(s, t)| {
                (0..cfg.depth)
                    .map(|i| {
                        TransformerBlock::new(
                            store,
                            init,
                            &format!("crm.{}2{}.blk{i}", s.label(), t.label()),
                            dim,
                            heads,
                            ffn_ratio,
                        )
                    })
                    .collect()
            })
            .collect();
        Crm {
            cfg: cfg.clone(),
            blocks,
        }
    }

    pub fn block_stack(&self, source: Spectrum, target: Spectrum) -> Option<&[TransformerBlock]> {
        pair_index(source, target).map(|i| self.blocks[i].as_slice())
    }

    /// Apply the (source, target) TransRe stack; shape-preserving.
    pub fn trans_re<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        f_src: Var,
        source: Spectrum,
        target: Spectrum,
    ) -> Result<Var> {
        let Some(idx) = pair_index(source, target) else {
            return Err(TensorError::Contract(format!(
                "trans_re: invalid pair {} -> {}",
                source.label(),
                target.label()
            )));
        };
        let mut x = f_src;
        for block in &self.blocks[idx] {
            x = block.forward(tape, bind, x, None)?;
        }
        Ok(x)
    }

    /// All six reconstructions from the three full token matrices.
    pub fn reconstruct_all<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        tokens: [Var; 3],
    ) -> Result<ReconstructionSet> {
        let mut recons = [tokens[0]; 6];
        for (i, &(s, t)) in PAIRS.iter().enumerate() {
            recons[i] = self.trans_re(tape, bind, tokens[s.index()], s, t)?;
        }
        Ok(ReconstructionSet { recons })
    }

    /// Token-level reconstruction loss: per pair, the per-token deviation is
    /// averaged over the M+1 tokens (squared L2 row norm for MSE, L1 row
    /// norm for MAE, and RMSE takes the square root of the MSE term); the
    /// six pair terms are summed.
    pub fn crm_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        recons: &ReconstructionSet,
        reals: [Var; 3],
    ) -> Result<Var> {
        let _ = bind;
        let mut total: Option<Var> = None;
        for (i, &(_, t)) in PAIRS.iter().enumerate() {
            let mut target = reals[t.index()];
            if self.cfg.detach_targets {
                target = tape.detach(target);
            }
            let tokens = tape.shape(target)[0];
            let inv = F::from_f64(1.0 / tokens as f64);
            let diff = tape.sub(recons.recons[i], target)?;
            let term = match self.cfg.loss {
                ReconLoss::Mse => {
                    let sq = tape.mul(diff, diff)?;
                    let s = tape.sum(sq);
                    tape.scale(s, inv)
                }
                ReconLoss::Mae => {
                    let ab = tape.abs(diff);
                    let s = tape.sum(ab);
                    tape.scale(s, inv)
                }
                ReconLoss::Rmse => {
                    let sq = tape.mul(diff, diff)?;
                    let s = tape.sum(sq);
                    let mse = tape.scale(s, inv);
                    let guarded = tape.add_const(mse, F::from_f64(1e-12));
                    tape.sqrt(guarded)
                }
            };
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.unwrap())
    }

    /// Fill each missing spectrum's token matrix with the mean of the
    /// reconstructions from all available sources (the two-source case is
    /// the published rule; one source degenerates to that reconstruction).
    pub fn reconstruct_missing<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        available: &[(Spectrum, Var)],
        missing: &[Spectrum],
    ) -> Result<Vec<(Spectrum, Var)>> {
        if available.is_empty() {
            return Err(TensorError::Contract(
                "reconstruct_missing: all spectra missing".into(),
            ));
        }
        if available.iter().any(|(s, _)| missing.contains(s)) {
            return Err(TensorError::Contract(
                "reconstruct_missing: a spectrum is both available and missing".into(),
            ));
        }
        let mut out = Vec::with_capacity(missing.len());
        for &m in missing {
            let mut acc: Option<Var> = None;
            for &(src, tokens) in available {
                let rec = self.trans_re(tape, bind, tokens, src, m)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, rec)?,
                    None => rec,
                });
            }
            let summed = acc.unwrap();
            let mean = tape.scale(summed, F::from_f64(1.0 / available.len() as f64));
            out.push((m, mean));
        }
        Ok(out)
    }
}
