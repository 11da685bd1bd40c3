//! Full model assembly: three spectrum encoders, the token-permutation
//! fusion, the cross-spectrum reconstruction module, classifier heads, and
//! the total training objective.

use rand_chacha::ChaCha8Rng;

use crate::config::{LossMode, RunConfig};
use crate::crm::Crm;
use crate::data::{Dataset, SpectralTriple, Spectrum};
use crate::objectives::{label_smoothing_ce, triplet_loss};
use crate::tensor::{
    Array, Init, ParamId, ParamStore, Result, Scalar, Tape, TensorError, Var,
};
use crate::tpm::Tpm;
use crate::vit::{linear, split_tokens, Encoder};

/// How to stand in for a missing spectrum's token matrix at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingFill {
    /// Cross-spectrum reconstruction from the available streams.
    Reconstruct,
    /// All-zero token matrix (the naive baseline).
    Zero,
}

struct Head {
    w: ParamId,
    b: Option<ParamId>,
}

impl Head {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        in_dim: usize,
        classes: usize,
        bias: bool,
    ) -> Self {
        Head {
            w: store.add(format!("{prefix}.w"), init.trunc_normal(vec![in_dim, classes])),
            b: bias.then(|| store.add(format!("{prefix}.b"), init.zeros(vec![1, classes]))),
        }
    }

    fn logits<F: Scalar>(&self, tape: &mut Tape<F>, bind: &[Var], x: Var) -> Result<Var> {
        linear(tape, bind, x, self.w, self.b)
    }
}

/// Per-step loss components; `total` is always the sum of the other five.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub l_ce_vit: f64,
    pub l_tri_vit: f64,
    pub l_ce_tp: f64,
    pub l_tri_tp: f64,
    pub l_cr: f64,
    pub total: f64,
}

pub struct Model {
    pub cfg: RunConfig,
    pub encoders: [Encoder; 3],
    pub tpm: Option<Tpm>,
    pub crm: Option<Crm>,
    vit_heads: Vec<Head>,
    tp_head: Option<Head>,
    pub num_classes: usize,
}

fn to_scalar<F: Scalar>(a: &Array<f64>) -> Array<F> {
    let data = a.data().iter().map(|&v| F::from_f64(v)).collect();
    Array::new(a.shape().to_vec(), data).unwrap()
}

impl Model {
    /// Registers every parameter in `store` in a fixed, name-stable order.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &RunConfig, num_classes: usize) -> Self {
        let mut init = Init::new(cfg.seed, 0.02);
        let enc = &cfg.encoder;
        // the three stream encoders start from identical weights (the
        // desk-scale stand-in for a shared pretrained backbone); this keeps
        // the initial cross-spectrum token disagreement, and with it the
        // reconstruction loss, small enough to train from scratch
        let encoders = ["R", "N", "T"].map(|s| {
            let mut stream_init = Init::new(cfg.seed ^ 0xE0C0DE, 0.02);
            Encoder::new(store, &mut stream_init, &format!("vit.{s}"), enc)
        });
        let tpm = cfg.tpm.enabled.then(|| {
            Tpm::new(store, &mut init, &cfg.tpm, enc.dim, enc.heads, enc.ffn_ratio)
        });
        let crm = cfg.crm.enabled.then(|| {
            Crm::new(store, &mut init, &cfg.crm, enc.dim, enc.heads, enc.ffn_ratio)
        });
        let bias = cfg.loss.head_bias;
        let vit_heads = match cfg.loss.mode {
            LossMode::Al => vec![Head::new(
                store,
                &mut init,
                "head.vit.al",
                3 * enc.dim,
                num_classes,
                bias,
            )],
            LossMode::Bl => ["R", "N", "T"]
                .iter()
                .map(|s| {
                    Head::new(
                        store,
                        &mut init,
                        &format!("head.vit.{s}"),
                        enc.dim,
                        num_classes,
                        bias,
                    )
                })
                .collect(),
        };
        let tp_head = cfg.tpm.enabled.then(|| {
            Head::new(store, &mut init, "head.tp", 3 * enc.dim, num_classes, bias)
        });
        Model {
            cfg: cfg.clone(),
            encoders,
            tpm,
            crm,
            vit_heads,
            tp_head,
            num_classes,
        }
    }

    /// Encode one full-spectral triple; returns per-stream `(tap, final)`
    /// token matrices, where `tap` is the fusion attach point.
    fn encode_triple<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        triple: &SpectralTriple,
        dataset: &Dataset,
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<[(Var, Var); 3]> {
        let tap = self.cfg.encoder.attach_layer();
        let mut out = [(Var(0), Var(0)); 3];
        for s in Spectrum::ALL {
            let Some(image) = &triple.images[s.index()] else {
                return Err(TensorError::Contract(format!(
                    "encode_triple: identity {} camera {} is missing spectrum {}",
                    triple.identity,
                    triple.camera,
                    s.label()
                )));
            };
            let norm = to_scalar::<F>(&dataset.normalize(s, image));
            let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            out[s.index()] = self.encoders[s.index()].encode_with_tap(tape, bind, &norm, tap, d)?;
        }
        Ok(out)
    }

    /// Ranking feature for one sample, 1 x 3D: `f_tp` when the permutation
    /// module is enabled, otherwise the three class tokens concatenated.
    /// Missing spectra are filled per `fill` before fusion.
    pub fn forward_feature<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        triple: &SpectralTriple,
        dataset: &Dataset,
        missing: &[Spectrum],
        fill: MissingFill,
    ) -> Result<Var> {
        let tap = self.cfg.encoder.attach_layer();
        let mut tokens: [Option<Var>; 3] = [None, None, None];
        let mut available = Vec::new();
        for s in Spectrum::ALL {
            if missing.contains(&s) {
                continue;
            }
            let Some(image) = &triple.images[s.index()] else {
                return Err(TensorError::Contract(format!(
                    "forward_feature: identity {} camera {} has no {} image",
                    triple.identity,
                    triple.camera,
                    s.label()
                )));
            };
            let norm = to_scalar::<F>(&dataset.normalize(s, image));
            let (tapped, _) =
                self.encoders[s.index()].encode_with_tap(tape, bind, &norm, tap, None)?;
            tokens[s.index()] = Some(tapped);
            available.push((s, tapped));
        }
        if available.is_empty() {
            return Err(TensorError::Contract(
                "forward_feature: every spectrum is missing".into(),
            ));
        }
        let to_fill: Vec<Spectrum> = Spectrum::ALL
            .into_iter()
            .filter(|s| tokens[s.index()].is_none())
            .collect();
        if !to_fill.is_empty() {
            match (fill, &self.crm) {
                (MissingFill::Reconstruct, Some(crm)) => {
                    for (s, rec) in crm.reconstruct_missing(tape, bind, &available, &to_fill)? {
                        tokens[s.index()] = Some(rec);
                    }
                }
                (MissingFill::Reconstruct, None) => {
                    return Err(TensorError::Contract(
                        "forward_feature: reconstruction fill requires the CRM".into(),
                    ));
                }
                (MissingFill::Zero, _) => {
                    let shape = tape.shape(available[0].1).to_vec();
                    for s in &to_fill {
                        tokens[s.index()] = Some(tape.constant(Array::zeros(shape.clone())));
                    }
                }
            }
        }
        let tokens = tokens.map(Option::unwrap);
        if let Some(tpm) = &self.tpm {
            let (f_tp, _) = tpm.run(tape, bind, tokens)?;
            Ok(f_tp)
        } else {
            let mut cls = Vec::with_capacity(3);
            for t in tokens {
                cls.push(split_tokens(tape, t)?.0);
            }
            tape.concat(&cls, 1)
        }
    }

    /// Training forward over a batch of full-spectral triples: builds every
    /// loss term of the total objective and returns `(total, report)`.
    /// Disabled branches contribute exactly zero.
    pub fn forward_batch_losses<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        batch: &[&SpectralTriple],
        dataset: &Dataset,
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(Var, LossReport)> {
        if batch.is_empty() {
            return Err(TensorError::Contract("forward_batch_losses: empty batch".into()));
        }
        let labels_usize: Vec<usize> =
            batch.iter().map(|t| dataset.class_of(t.identity)).collect();
        let labels_u32: Vec<u32> = labels_usize.iter().map(|&l| l as u32).collect();

        let mut cls_rows: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut tp_rows = Vec::new();
        let mut cr_terms = Vec::new();
        for triple in batch {
            let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            let streams = self.encode_triple(tape, bind, triple, dataset, d)?;
            for s in 0..3 {
                cls_rows[s].push(split_tokens(tape, streams[s].1)?.0);
            }
            let taps = [streams[0].0, streams[1].0, streams[2].0];
            if let Some(tpm) = &self.tpm {
                let (f_tp, _) = tpm.run(tape, bind, taps)?;
                tp_rows.push(f_tp);
            }
            if let Some(crm) = &self.crm {
                let recons = crm.reconstruct_all(tape, bind, taps)?;
                cr_terms.push(crm.crm_loss(tape, bind, &recons, taps)?);
            }
        }
        let cls: [Var; 3] = [
            tape.concat(&cls_rows[0], 0)?,
            tape.concat(&cls_rows[1], 0)?,
            tape.concat(&cls_rows[2], 0)?,
        ];

        let eps = self.cfg.loss.smoothing;
        let margin = self.cfg.loss.margin;
        let zero = tape.scalar(F::from_f64(0.0));

        let (l_ce_vit, l_tri_vit) = match self.cfg.loss.mode {
            LossMode::Al => {
                let feat = tape.concat(&cls, 1)?;
                let logits = self.vit_heads[0].logits(tape, bind, feat)?;
                let ce = label_smoothing_ce(tape, logits, &labels_usize, eps)?;
                let tri = triplet_loss(tape, feat, &labels_u32, margin)?;
                (ce, tri)
            }
            LossMode::Bl => {
                let mut ce_sum = None;
                let mut tri_sum = None;
                for s in 0..3 {
                    let logits = self.vit_heads[s].logits(tape, bind, cls[s])?;
                    let ce = label_smoothing_ce(tape, logits, &labels_usize, eps)?;
                    let tri = triplet_loss(tape, cls[s], &labels_u32, margin)?;
                    ce_sum = Some(match ce_sum {
                        Some(a) => tape.add(a, ce)?,
                        None => ce,
                    });
                    tri_sum = Some(match tri_sum {
                        Some(a) => tape.add(a, tri)?,
                        None => tri,
                    });
                }
                (ce_sum.unwrap(), tri_sum.unwrap())
            }
        };

        let (l_ce_tp, l_tri_tp) = if let Some(head) = &self.tp_head {
            let f_tp = tape.concat(&tp_rows, 0)?;
            let logits = head.logits(tape, bind, f_tp)?;
            let ce = label_smoothing_ce(tape, logits, &labels_usize, eps)?;
            let tri = triplet_loss(tape, f_tp, &labels_u32, margin)?;
            (ce, tri)
        } else {
            (zero, zero)
        };

        let l_cr = if cr_terms.is_empty() {
            zero
        } else {
            let mut acc = cr_terms[0];
            for &t in &cr_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            let weight = self.cfg.loss.crm_loss_weight / cr_terms.len() as f64;
            tape.scale(acc, F::from_f64(weight))
        };

        let mut total = tape.add(l_tri_vit, l_ce_vit)?;
        total = tape.add(total, l_tri_tp)?;
        total = tape.add(total, l_ce_tp)?;
        total = tape.add(total, l_cr)?;

        let item = |v: Var, tape: &Tape<F>| tape.value(v).item().to_f64();
        let report = LossReport {
            l_ce_vit: item(l_ce_vit, tape),
            l_tri_vit: item(l_tri_vit, tape),
            l_ce_tp: item(l_ce_tp, tape),
            l_tri_tp: item(l_tri_tp, tape),
            l_cr: item(l_cr, tape),
            total: item(total, tape),
        };
        Ok((total, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::synth_dataset;

    fn micro_config() -> RunConfig {
        let mut cfg = RunConfig::desk_scale();
        cfg.encoder.height = 32;
        cfg.encoder.width = 32;
        cfg.encoder.dim = 8;
        cfg.encoder.depth = 1;
        cfg.encoder.heads = 2;
        cfg.encoder.dropout = 0.0;
        cfg
    }

    fn micro_dataset(cfg: &RunConfig) -> Dataset {
        synth_dataset(2, 2, 2, cfg.encoder.height, cfg.encoder.width, 5)
    }

    #[test]
    fn total_is_sum_of_components_and_all_terms_active() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, ds.num_classes());
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let batch: Vec<&SpectralTriple> =
            [0usize, 1, 4, 5].iter().map(|&i| &ds.triples[i]).collect();
        let (total, rep) = model
            .forward_batch_losses(&mut tape, &bind, &batch, &ds, None)
            .unwrap();
        let sum = rep.l_ce_vit + rep.l_tri_vit + rep.l_ce_tp + rep.l_tri_tp + rep.l_cr;
        assert!((rep.total - sum).abs() < 1e-9);
        assert_eq!(tape.value(total).item(), rep.total);
        for part in [rep.l_ce_vit, rep.l_ce_tp, rep.l_cr] {
            assert!(part > 0.0);
        }
    }

    #[test]
    fn disabled_branches_contribute_exactly_zero() {
        let mut cfg = micro_config();
        cfg.tpm.enabled = false;
        cfg.crm.enabled = false;
        let ds = micro_dataset(&cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, ds.num_classes());
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let batch: Vec<&SpectralTriple> =
            [0usize, 1, 4, 5].iter().map(|&i| &ds.triples[i]).collect();
        let (_, rep) = model
            .forward_batch_losses(&mut tape, &bind, &batch, &ds, None)
            .unwrap();
        assert_eq!(rep.l_ce_tp, 0.0);
        assert_eq!(rep.l_tri_tp, 0.0);
        assert_eq!(rep.l_cr, 0.0);
        assert!((rep.total - rep.l_ce_vit - rep.l_tri_vit).abs() < 1e-12);
    }

    #[test]
    fn bl_mode_uses_three_per_stream_heads() {
        let mut cfg = micro_config();
        cfg.loss.mode = LossMode::Bl;
        let ds = micro_dataset(&cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, ds.num_classes());
        assert!(store.by_name("head.vit.R.w").is_some());
        assert!(store.by_name("head.vit.al.w").is_none());
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let batch: Vec<&SpectralTriple> =
            [0usize, 1, 4, 5].iter().map(|&i| &ds.triples[i]).collect();
        let (total, _) = model
            .forward_batch_losses(&mut tape, &bind, &batch, &ds, None)
            .unwrap();
        // per-stream heads all receive gradient
        let g = tape.backward(total).unwrap();
        for s in ["R", "N", "T"] {
            let id = store.by_name(&format!("head.vit.{s}.w")).unwrap();
            assert!(g.get(bind[id.0]).is_some());
        }
    }

    #[test]
    fn empty_missing_set_bit_equals_full_forward() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, ds.num_classes());
        let triple = &ds.triples[0];
        let mut t1 = Tape::new();
        let b1 = store.bind_frozen(&mut t1);
        let full = model
            .forward_feature(&mut t1, &b1, triple, &ds, &[], MissingFill::Reconstruct)
            .unwrap();
        let mut t2 = Tape::new();
        let b2 = store.bind_frozen(&mut t2);
        let again = model
            .forward_feature(&mut t2, &b2, triple, &ds, &[], MissingFill::Zero)
            .unwrap();
        assert_eq!(t1.value(full).data(), t2.value(again).data());
        assert_eq!(t1.shape(full), &[1, 3 * cfg.encoder.dim]);
    }

    #[test]
    fn missing_spectrum_changes_feature_but_keeps_shape() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, ds.num_classes());
        let triple = &ds.triples[0];
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let full = model
            .forward_feature(&mut tape, &bind, triple, &ds, &[], MissingFill::Reconstruct)
            .unwrap();
        let miss_n = model
            .forward_feature(&mut tape, &bind, triple, &ds, &[Spectrum::N], MissingFill::Reconstruct)
            .unwrap();
        let zero_n = model
            .forward_feature(&mut tape, &bind, triple, &ds, &[Spectrum::N], MissingFill::Zero)
            .unwrap();
        assert_eq!(tape.shape(miss_n), &[1, 3 * cfg.encoder.dim]);
        assert_ne!(tape.value(full).data(), tape.value(miss_n).data());
        assert_ne!(tape.value(miss_n).data(), tape.value(zero_n).data());
        // two spectra missing exercises the single-source path
        let only_r = model
            .forward_feature(
                &mut tape,
                &bind,
                triple,
                &ds,
                &[Spectrum::N, Spectrum::T],
                MissingFill::Reconstruct,
            )
            .unwrap();
        assert!(tape.value(only_r).is_finite());
        // all missing is a contract error
        assert!(model
            .forward_feature(
                &mut tape,
                &bind,
                triple,
                &ds,
                &[Spectrum::R, Spectrum::N, Spectrum::T],
                MissingFill::Reconstruct,
            )
            .is_err());
    }
}
