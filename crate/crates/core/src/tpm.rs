//! Token Permutation Module: three consecutive cross-attention stages that
//! cycle each stream's class token through the other streams' patch banks
//! (R -> N -> T -> R), ending with each class token attending its own
//! patches, then concatenating the three permuted class tokens.

use crate::config::TpmConfig;
use crate::tensor::{Array, Init, ParamId, ParamStore, Result, Scalar, Tape, TensorError, Var};
use crate::vit::{linear, LN_EPS};

/// Parameters of one (stage, stream) cross-attention + FFN unit.
pub struct PermutationUnit {
    pub lnq_g: ParamId,
    pub lnq_b: ParamId,
    pub lnkv_g: ParamId,
    pub lnkv_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    dim: usize,
    heads: usize,
}

impl PermutationUnit {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        let hidden = dim * ffn_ratio;
        let w = |i: &mut Init, r, c| i.trunc_normal::<F>(vec![r, c]);
        PermutationUnit {
            lnq_g: store.add(format!("{prefix}.lnq.g"), Array::full(vec![1, dim], F::one())),
            lnq_b: store.add(format!("{prefix}.lnq.b"), Array::zeros(vec![1, dim])),
            lnkv_g: store.add(format!("{prefix}.lnkv.g"), Array::full(vec![1, dim], F::one())),
            lnkv_b: store.add(format!("{prefix}.lnkv.b"), Array::zeros(vec![1, dim])),
            wq: store.add(format!("{prefix}.wq"), w(init, dim, dim)),
            bq: store.add(format!("{prefix}.bq"), Array::zeros(vec![1, dim])),
            wk: store.add(format!("{prefix}.wk"), w(init, dim, dim)),
            bk: store.add(format!("{prefix}.bk"), Array::zeros(vec![1, dim])),
            wv: store.add(format!("{prefix}.wv"), w(init, dim, dim)),
            bv: store.add(format!("{prefix}.bv"), Array::zeros(vec![1, dim])),
            wo: store.add(format!("{prefix}.wo"), w(init, dim, dim)),
            bo: store.add(format!("{prefix}.bo"), Array::zeros(vec![1, dim])),
            w1: store.add(format!("{prefix}.ffn.w1"), w(init, dim, hidden)),
            b1: store.add(format!("{prefix}.ffn.b1"), Array::zeros(vec![1, hidden])),
            w2: store.add(format!("{prefix}.ffn.w2"), w(init, hidden, dim)),
            b2: store.add(format!("{prefix}.ffn.b2"), Array::zeros(vec![1, dim])),
            dim,
            heads,
        }
    }
}

/// Class tokens and patch banks threaded through the permutation stages.
/// Patch banks are never modified; only class tokens move.
#[derive(Clone, Copy)]
pub struct PermutationState {
    /// Class tokens (1 x D rows), indexed R, N, T.
    pub cls: [Var; 3],
    /// Patch banks (M x D), indexed R, N, T.
    pub patches: [Var; 3],
    pub stage: usize,
}

pub struct Tpm {
    pub cfg: TpmConfig,
    /// units[stage][stream]; with stream sharing, units[stage] holds one
    /// entry reused by all streams.
    units: Vec<Vec<PermutationUnit>>,
    dim: usize,
}

impl Tpm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        cfg: &TpmConfig,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        let streams = ["R", "N", "T"];
        let units = (1..=cfg.num_stages)
            .map(|stage| {
                if cfg.share_streams {
                    vec![PermutationUnit::new(
                        store,
                        init,
                        &format!("tpm.s{stage}.shared"),
                        dim,
                        heads,
                        ffn_ratio,
                    )]
                } else {
                    streams
                        .iter()
                        .map(|s| {
                            PermutationUnit::new(
                                store,
                                init,
                                &format!("tpm.s{stage}.{s}"),
                                dim,
                                heads,
                                ffn_ratio,
                            )
                        })
                        .collect()
                }
            })
            .collect();
        Tpm {
            cfg: cfg.clone(),
            units,
            dim,
        }
    }

    pub fn unit(&self, stage: usize, stream: usize) -> &PermutationUnit {
        let row = &self.units[stage - 1];
        if self.cfg.share_streams {
            &row[0]
        } else {
            &row[stream]
        }
    }

    /// One cross-attention step: the class token (query) attends the patch
    /// bank (keys/values), per-head scale 1/sqrt(D/N_h), then
    /// `FFN(out) + out` with the residual on the attention output.
    pub fn permute_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        cls: Var,
        patches: Var,
        unit: &PermutationUnit,
    ) -> Result<Var> {
        let d = unit.dim;
        if tape.shape(cls) != [1, d] || tape.shape(patches).len() != 2 || tape.shape(patches)[1] != d
        {
            return Err(TensorError::ShapeMismatch {
                op: "permute_step",
                lhs: tape.shape(cls).to_vec(),
                rhs: tape.shape(patches).to_vec(),
            });
        }
        let hd = d / unit.heads;
        let eps = F::from_f64(LN_EPS);
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());

        let qn = tape.layer_norm(cls, bind[unit.lnq_g.0], bind[unit.lnq_b.0], eps)?;
        let kn = tape.layer_norm(patches, bind[unit.lnkv_g.0], bind[unit.lnkv_b.0], eps)?;
        let q = linear(tape, bind, qn, unit.wq, Some(unit.bq))?;
        let k = linear(tape, bind, kn, unit.wk, Some(unit.bk))?;
        let v = linear(tape, bind, kn, unit.wv, Some(unit.bv))?;

        let mut heads = Vec::with_capacity(unit.heads);
        for h in 0..unit.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?; // 1 x M
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax(scaled);
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let mhca = linear(tape, bind, cat, unit.wo, Some(unit.bo))?;

        let h1 = linear(tape, bind, mhca, unit.w1, Some(unit.b1))?;
        let act = tape.gelu(h1);
        let ffn = linear(tape, bind, act, unit.w2, Some(unit.b2))?;
        tape.add(ffn, mhca)
    }

    /// Advance one stage: at stage k, the class token of stream s attends
    /// the patch bank of stream (s + k) mod 3, so stage 1 visits the next
    /// spectrum, stage 2 the one after, and stage 3 the stream's own bank.
    pub fn tpm_stage<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        state: &PermutationState,
        k: usize,
    ) -> Result<PermutationState> {
        if k < 1 || k > self.cfg.num_stages {
            return Err(TensorError::Contract(format!(
                "tpm_stage: stage {k} out of 1..={}",
                self.cfg.num_stages
            )));
        }
        if state.stage != k - 1 {
            return Err(TensorError::Contract(format!(
                "tpm_stage: expected state at stage {}, got {}",
                k - 1,
                state.stage
            )));
        }
        let mut cls = [state.cls[0]; 3];
        for s in 0..3 {
            let bank = state.patches[(s + k) % 3];
            cls[s] = self.permute_step(tape, bind, state.cls[s], bank, self.unit(k, s))?;
        }
        Ok(PermutationState {
            cls,
            patches: state.patches,
            stage: k,
        })
    }

    /// Concatenate the final-stage class tokens, order fixed R, N, T.
    pub fn fuse<F: Scalar>(&self, tape: &mut Tape<F>, state: &PermutationState) -> Result<Var> {
        if state.stage != self.cfg.num_stages {
            return Err(TensorError::Contract(format!(
                "fuse: state at stage {}, expected {}",
                state.stage, self.cfg.num_stages
            )));
        }
        tape.concat(&[state.cls[0], state.cls[1], state.cls[2]], 1)
    }

    /// Full module: split tokens, run the configured stages, fuse.
    /// Returns the fused 1 x 3D feature and the final state.
    pub fn run<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        tokens: [Var; 3],
    ) -> Result<(Var, PermutationState)> {
        let shape = tape.shape(tokens[0]).to_vec();
        for &t in &tokens[1..] {
            if tape.shape(t) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "run_tpm",
                    lhs: shape,
                    rhs: tape.shape(t).to_vec(),
                });
            }
        }
        if shape.len() != 2 || shape[0] < 2 || shape[1] != self.dim {
            return Err(TensorError::BadShape {
                op: "run_tpm",
                shape,
                reason: format!("expected (M+1) x {} token matrices", self.dim),
            });
        }
        let mut cls = [tokens[0]; 3];
        let mut patches = [tokens[0]; 3];
        for s in 0..3 {
            let split = crate::vit::split_tokens(tape, tokens[s])?;
            cls[s] = split.0;
            patches[s] = split.1;
        }
        let mut state = PermutationState {
            cls,
            patches,
            stage: 0,
        };
        for k in 1..=self.cfg.num_stages {
            state = self.tpm_stage(tape, bind, &state, k)?;
        }
        let fused = self.fuse(tape, &state)?;
        Ok((fused, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Gradients, ParamStore};

    const D: usize = 8;
    const M: usize = 4;
    const NH: usize = 2;

    fn setup(share: bool, stages: usize, seed: u64) -> (ParamStore<f64>, Tpm) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, 0.2);
        let cfg = TpmConfig {
            enabled: true,
            num_stages: stages,
            share_streams: share,
        };
        let tpm = Tpm::new(&mut store, &mut init, &cfg, D, NH, 2);
        (store, tpm)
    }

    fn rand_tokens(tape: &mut Tape<f64>, seed: u64) -> [Var; 3] {
        let mut init = Init::new(seed, 1.0);
        [0, 1, 2].map(|_| tape.leaf(init.trunc_normal(vec![M + 1, D]), true))
    }

    fn grad_nonzero(g: &Gradients<f64>, v: Var) -> bool {
        g.get(v)
            .map(|a| a.data().iter().any(|&x| x.abs() > 1e-12))
            .unwrap_or(false)
    }

    #[test]
    fn single_patch_attention_weight_is_one() {
        // M = 1: softmax over one element is exactly 1, so the attention
        // output equals the single value row regardless of query content.
        let (store, tpm) = setup(false, 3, 0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut init = Init::new(99, 1.0);
        let cls = tape.leaf(init.trunc_normal(vec![1, D]), true);
        let patch = tape.leaf(init.trunc_normal(vec![1, D]), true);
        let unit = tpm.unit(1, 0);

        let out = tpm.permute_step(&mut tape, &bind, cls, patch, unit).unwrap();

        // straight-line: with one patch, mhca = v @ wo + bo row
        let eps = LN_EPS;
        let ln = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * rstd * g[j] + b[j])
                .collect()
        };
        let matvec = |x: &[f64], w: &[f64], b: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let mut out = b.to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    out[j] += x[i] * w[i * cols + j];
                }
            }
            out
        };
        let kn = ln(
            tape.value(patch).data(),
            store.get(unit.lnkv_g).data(),
            store.get(unit.lnkv_b).data(),
        );
        let v = matvec(&kn, store.get(unit.wv).data(), store.get(unit.bv).data(), D, D);
        let mhca = matvec(&v, store.get(unit.wo).data(), store.get(unit.bo).data(), D, D);
        let h1 = matvec(&mhca, store.get(unit.w1).data(), store.get(unit.b1).data(), D, 2 * D);
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let act: Vec<f64> = h1.iter().map(|&x| gelu(x)).collect();
        let ffn = matvec(&act, store.get(unit.w2).data(), store.get(unit.b2).data(), 2 * D, D);
        for j in 0..D {
            assert!((tape.value(out).data()[j] - (ffn[j] + mhca[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn zeroed_projections_give_zero_output() {
        let (mut store, tpm) = setup(false, 3, 1);
        // zero V- and output-projections (plus FFN weights) of stage-1 R unit
        let unit_ids = {
            let u = tpm.unit(1, 0);
            [u.wv, u.bv, u.wo, u.bo, u.w1, u.b1, u.w2, u.b2]
        };
        for id in unit_ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut init = Init::new(5, 1.0);
        let cls = tape.leaf(init.trunc_normal(vec![1, D]), true);
        let patches = tape.leaf(init.trunc_normal(vec![M, D]), true);
        let out = tpm
            .permute_step(&mut tape, &bind, cls, patches, tpm.unit(1, 0))
            .unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_dependency_schedule() {
        let (store, tpm) = setup(false, 3, 2);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let tokens = rand_tokens(&mut tape, 3);

        let mut cls = [tokens[0]; 3];
        let mut patches = [tokens[0]; 3];
        for s in 0..3 {
            let sp = crate::vit::split_tokens(&mut tape, tokens[s]).unwrap();
            cls[s] = sp.0;
            patches[s] = sp.1;
        }
        let state0 = PermutationState { cls, patches, stage: 0 };
        let s1 = tpm.tpm_stage(&mut tape, &bind, &state0, 1).unwrap();

        // after stage 1, R-cls depends only on the N patch bank
        let sum = tape.sum(s1.cls[0]);
        let g = tape.backward(sum).unwrap();
        assert!(!grad_nonzero(&g, tokens[0]) || {
            // R tokens feed R-cls only through the class-token row
            let gr = g.get(tokens[0]).unwrap();
            gr.data()[D..].iter().all(|&x| x.abs() < 1e-12)
        });
        assert!(grad_nonzero(&g, tokens[1]));
        // T bank unused at stage 1 for the R stream
        let gt = g.get(tokens[2]);
        assert!(gt.map_or(true, |a| a.data().iter().all(|&x| x.abs() < 1e-12)));

        // after all three stages every bank reaches R-cls
        let s2 = tpm.tpm_stage(&mut tape, &bind, &s1, 2).unwrap();
        let s3 = tpm.tpm_stage(&mut tape, &bind, &s2, 3).unwrap();
        let sum3 = tape.sum(s3.cls[0]);
        let g3 = tape.backward(sum3).unwrap();
        for s in 0..3 {
            assert!(grad_nonzero(&g3, tokens[s]), "bank {s} unreachable");
        }

        // patch banks are bit-identical before and after
        for s in 0..3 {
            assert_eq!(tape.value(s3.patches[s]).data(), tape.value(patches[s]).data());
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        let (store, tpm) = setup(false, 3, 4);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let tokens = rand_tokens(&mut tape, 6);
        let mut cls = [tokens[0]; 3];
        let mut patches = [tokens[0]; 3];
        for s in 0..3 {
            let sp = crate::vit::split_tokens(&mut tape, tokens[s]).unwrap();
            cls[s] = sp.0;
            patches[s] = sp.1;
        }
        let state0 = PermutationState { cls, patches, stage: 0 };
        assert!(tpm.tpm_stage(&mut tape, &bind, &state0, 2).is_err());
        assert!(tpm.fuse(&mut tape, &state0).is_err());
    }

    #[test]
    fn shared_units_with_identical_inputs_are_symmetric() {
        let (store, tpm) = setup(true, 3, 7);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut init = Init::new(8, 1.0);
        let tok = tape.leaf(init.trunc_normal(vec![M + 1, D]), true);
        let (fused, _) = tpm.run(&mut tape, &bind, [tok, tok, tok]).unwrap();
        let v = tape.value(fused).data();
        assert_eq!(&v[..D], &v[D..2 * D]);
        assert_eq!(&v[D..2 * D], &v[2 * D..]);
    }

    #[test]
    fn fuse_layout_and_order_sensitivity() {
        let (store, tpm) = setup(false, 3, 9);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let tokens = rand_tokens(&mut tape, 10);
        let (fused, state) = tpm.run(&mut tape, &bind, tokens).unwrap();
        assert_eq!(tape.shape(fused), &[1, 3 * D]);
        assert_eq!(
            &tape.value(fused).data()[..D],
            tape.value(state.cls[0]).data()
        );
        assert!(tape.value(fused).is_finite());

        // swapping stream order without relabeling changes the output
        let (fused_swapped, _) = tpm
            .run(&mut tape, &bind, [tokens[1], tokens[0], tokens[2]])
            .unwrap();
        assert_ne!(tape.value(fused).data(), tape.value(fused_swapped).data());
    }

    #[test]
    fn truncated_stage_variants_run() {
        for stages in 1..=2 {
            let (store, tpm) = setup(false, stages, 20 + stages as u64);
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let tokens = rand_tokens(&mut tape, 30 + stages as u64);
            let (fused, state) = tpm.run(&mut tape, &bind, tokens).unwrap();
            assert_eq!(state.stage, stages);
            assert_eq!(tape.shape(fused), &[1, 3 * D]);
        }
    }
}
