//! Spectrum-specific ViT-style encoders: patchify, linear embedding with a
//! learnable class token and positional table, then a stack of pre-norm
//! transformer blocks. The same block doubles as the CRM's reconstruction
//! block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::tensor::{Array, Init, ParamId, ParamStore, Result, Scalar, Tape, TensorError, Var};

pub const LN_EPS: f64 = 1e-6;

/// Cut non-overlapping row-major `p x p` patches, each flattened
/// channel-last, from an `[H, W, 3]` image.
pub fn patchify<F: Scalar>(image: &Array<F>, p: usize) -> Result<Array<F>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(TensorError::BadShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: "expected an [H, W, 3] image".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TensorError::BadShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: format!("dimensions not divisible by patch size {p}"),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let m = gh * gw;
    let mut data = Vec::with_capacity(m * p * p * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let y = py * p + dy;
                for dx in 0..p {
                    let x = px * p + dx;
                    let base = (y * w + x) * 3;
                    data.extend_from_slice(&image.data()[base..base + 3]);
                }
            }
        }
    }
    Array::matrix(m, p * p * 3, data)
}

/// One pre-norm transformer block: LN -> multi-head self-attention ->
/// residual -> LN -> FFN(GELU) -> residual.
pub struct TransformerBlock {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    dim: usize,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        let hidden = dim * ffn_ratio;
        let w = |i: &mut Init, r, c| i.trunc_normal::<F>(vec![r, c]);
        TransformerBlock {
            ln1_g: store.add(format!("{prefix}.ln1.g"), Array::full(vec![1, dim], F::one())),
            ln1_b: store.add(format!("{prefix}.ln1.b"), Array::zeros(vec![1, dim])),
            wq: store.add(format!("{prefix}.attn.wq"), w(init, dim, dim)),
            bq: store.add(format!("{prefix}.attn.bq"), Array::zeros(vec![1, dim])),
            wk: store.add(format!("{prefix}.attn.wk"), w(init, dim, dim)),
            bk: store.add(format!("{prefix}.attn.bk"), Array::zeros(vec![1, dim])),
            wv: store.add(format!("{prefix}.attn.wv"), w(init, dim, dim)),
            bv: store.add(format!("{prefix}.attn.bv"), Array::zeros(vec![1, dim])),
            wo: store.add(format!("{prefix}.attn.wo"), w(init, dim, dim)),
            bo: store.add(format!("{prefix}.attn.bo"), Array::zeros(vec![1, dim])),
            ln2_g: store.add(format!("{prefix}.ln2.g"), Array::full(vec![1, dim], F::one())),
            ln2_b: store.add(format!("{prefix}.ln2.b"), Array::zeros(vec![1, dim])),
            w1: store.add(format!("{prefix}.ffn.w1"), w(init, dim, hidden)),
            b1: store.add(format!("{prefix}.ffn.b1"), Array::zeros(vec![1, hidden])),
            w2: store.add(format!("{prefix}.ffn.w2"), w(init, hidden, dim)),
            b2: store.add(format!("{prefix}.ffn.b2"), Array::zeros(vec![1, dim])),
            dim,
            heads,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        x: Var,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        let d = self.dim;
        let hd = d / self.heads;
        let eps = F::from_f64(LN_EPS);
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());

        let ln1 = tape.layer_norm(x, bind[self.ln1_g.0], bind[self.ln1_b.0], eps)?;
        let q = linear(tape, bind, ln1, self.wq, Some(self.bq))?;
        let k = linear(tape, bind, ln1, self.wk, Some(self.bk))?;
        let v = linear(tape, bind, ln1, self.wv, Some(self.bv))?;

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax(scaled);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(&head_outs, 1)?;
        let mut attn_out = linear(tape, bind, cat, self.wo, Some(self.bo))?;
        let mut drop = dropout;
        if let Some((rng, p)) = drop.as_mut() {
            attn_out = apply_dropout(tape, attn_out, rng, *p);
        }
        let x1 = tape.add(x, attn_out)?;

        let ln2 = tape.layer_norm(x1, bind[self.ln2_g.0], bind[self.ln2_b.0], eps)?;
        let h1 = linear(tape, bind, ln2, self.w1, Some(self.b1))?;
        let act = tape.gelu(h1);
        let mut ffn_out = linear(tape, bind, act, self.w2, Some(self.b2))?;
        if let Some((rng, p)) = drop.as_mut() {
            ffn_out = apply_dropout(tape, ffn_out, rng, *p);
        }
        tape.add(x1, ffn_out)
    }
}

/// x @ w (+ row-broadcast bias).
pub fn linear<F: Scalar>(
    tape: &mut Tape<F>,
    bind: &[Var],
    x: Var,
    w: ParamId,
    b: Option<ParamId>,
) -> Result<Var> {
    let y = tape.matmul(x, bind[w.0])?;
    match b {
        Some(b) => tape.add_row(y, bind[b.0]),
        None => Ok(y),
    }
}

fn apply_dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, rng: &mut ChaCha8Rng, p: f64) -> Var {
    if p <= 0.0 {
        return x;
    }
    let shape = tape.shape(x).to_vec();
    let keep = F::from_f64(1.0 / (1.0 - p));
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel)
        .map(|_| {
            if rng.gen::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = tape.constant(Array::new(shape, data).unwrap());
    tape.mul(x, mask).unwrap()
}

/// One spectrum's encoder: embedding plus a block stack. The three streams
/// instantiate this independently, so they share no parameters.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

impl Encoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let m = cfg.num_patches();
        let pdim = cfg.patch * cfg.patch * 3;
        let patch_w = store.add(
            format!("{prefix}.patch.w"),
            init.trunc_normal::<F>(vec![pdim, cfg.dim]),
        );
        let patch_b = store.add(format!("{prefix}.patch.b"), Array::zeros(vec![1, cfg.dim]));
        let cls = store.add(
            format!("{prefix}.cls"),
            init.trunc_normal::<F>(vec![1, cfg.dim]),
        );
        let pos = store.add(
            format!("{prefix}.pos"),
            init.trunc_normal::<F>(vec![m + 1, cfg.dim]),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{prefix}.blk{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.ffn_ratio,
                )
            })
            .collect();
        let lnf_g = store.add(format!("{prefix}.lnf.g"), Array::full(vec![1, cfg.dim], F::from_f64(1.0)));
        let lnf_b = store.add(format!("{prefix}.lnf.b"), Array::zeros(vec![1, cfg.dim]));
        Encoder {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        }
    }

    /// Project patches to D, prepend the class token, add positions.
    pub fn embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        patches: Var,
    ) -> Result<Var> {
        let m = self.cfg.num_patches();
        let got = tape.shape(patches).to_vec();
        if got != [m, self.cfg.patch * self.cfg.patch * 3] {
            return Err(TensorError::BadShape {
                op: "embed",
                shape: got,
                reason: format!("expected {m} patches of {}", self.cfg.patch.pow(2) * 3),
            });
        }
        let proj = linear(tape, bind, patches, self.patch_w, Some(self.patch_b))?;
        let with_cls = tape.concat(&[bind[self.cls.0], proj], 0)?;
        tape.add(with_cls, bind[self.pos.0])
    }

    /// Tokens after block `k` (k = depth reproduces the full encode).
    pub fn encode_to_layer<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        image: &Array<F>,
        k: usize,
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        if k > self.cfg.depth {
            return Err(TensorError::Contract(format!(
                "encode_to_layer: layer {k} out of range 1..={}",
                self.cfg.depth
            )));
        }
        let patches = patchify(image, self.cfg.patch)?;
        let patches = tape.constant(patches);
        let mut x = self.embed(tape, bind, patches)?;
        for block in &self.blocks[..k] {
            let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            x = block.forward(tape, bind, x, d)?;
        }
        // final norm only on the full encode; intermediate taps stay raw
        if k == self.cfg.depth {
            x = tape.layer_norm(x, bind[self.lnf_g.0], bind[self.lnf_b.0], F::from_f64(LN_EPS))?;
        }
        Ok(x)
    }

    /// Full encode that also returns the tokens at layer `tap` (the fusion
    /// attach point). With `tap == depth` both results are the same node.
    pub fn encode_with_tap<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        image: &Array<F>,
        tap: usize,
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(Var, Var)> {
        if tap > self.cfg.depth {
            return Err(TensorError::Contract(format!(
                "encode_with_tap: layer {tap} out of range 1..={}",
                self.cfg.depth
            )));
        }
        let patches = patchify(image, self.cfg.patch)?;
        let patches = tape.constant(patches);
        let mut x = self.embed(tape, bind, patches)?;
        let mut tapped = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            x = block.forward(tape, bind, x, d)?;
            if i + 1 == tap {
                tapped = x;
            }
        }
        x = tape.layer_norm(x, bind[self.lnf_g.0], bind[self.lnf_b.0], F::from_f64(LN_EPS))?;
        if tap == self.cfg.depth {
            tapped = x;
        }
        Ok((tapped, x))
    }

    /// Final-layer token matrix, shape (M+1) x D.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bind: &[Var],
        image: &Array<F>,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        self.encode_to_layer(tape, bind, image, self.cfg.depth, dropout)
    }
}

/// Split a token matrix into (class-token row, patch rows).
pub fn split_tokens<F: Scalar>(tape: &mut Tape<F>, tokens: Var) -> Result<(Var, Var)> {
    let rows = tape.shape(tokens)[0];
    let cls = tape.slice_rows(tokens, 0, 1)?;
    let patches = tape.slice_rows(tokens, 1, rows - 1)?;
    Ok((cls, patches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            height: 32,
            width: 16,
            patch: 16,
            dim: 8,
            depth: 2,
            heads: 2,
            ffn_ratio: 2,
            tpm_attach_layer: None,
            dropout: 0.0,
        }
    }

    fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Array<f64> {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Array::new(vec![h, w, 3], data).unwrap()
    }

    #[test]
    fn patchify_counts_and_constants() {
        let img = image(256, 128, |y, x, c| (y * 128 * 3 + x * 3 + c) as f64);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[128, 16 * 16 * 3]);

        let tiny = image(16, 16, |y, x, c| (y * 16 * 3 + x * 3 + c) as f64);
        let p1 = patchify(&tiny, 16).unwrap();
        assert_eq!(p1.shape(), &[1, 768]);
        assert_eq!(p1.data(), tiny.data());

        let constant = image(32, 16, |_, _, _| 2.5);
        let p2 = patchify(&constant, 16).unwrap();
        assert_eq!(p2.shape(), &[2, 768]);
        assert!(p2.data().iter().all(|&v| v == 2.5));
        assert_eq!(
            &p2.data()[..768],
            &p2.data()[768..],
            "constant image gives identical patch vectors"
        );

        assert!(patchify(&image(30, 16, |_, _, _| 0.0), 16).is_err());
    }

    #[test]
    fn embed_is_additive_and_shaped() {
        let cfg = micro_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0, 0.02);
        let enc = Encoder::new(&mut store, &mut init, "vit.R", &cfg);

        // zero patches + zero projection weights -> cls + positions
        store.get_mut(enc.patch_w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let patches = tape.constant(Array::zeros(vec![2, 768]));
        let tokens = enc.embed(&mut tape, &bind, patches).unwrap();
        assert_eq!(tape.shape(tokens), &[3, 8]);
        let cls = store.get(enc.cls).data();
        let pos = store.get(enc.pos).data();
        let got = tape.value(tokens).data();
        for j in 0..8 {
            assert!((got[j] - (cls[j] + pos[j])).abs() < 1e-12);
        }
        for i in 1..3 {
            for j in 0..8 {
                assert!((got[i * 8 + j] - pos[i * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_locality_single_patch_difference() {
        let cfg = micro_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1, 0.02);
        let enc = Encoder::new(&mut store, &mut init, "vit.R", &cfg);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);

        let img_a = image(32, 16, |y, x, c| ((y + x + c) as f64).sin());
        // differ only inside the second patch (rows 16..32)
        let img_b = image(32, 16, |y, x, c| {
            if y >= 16 {
                ((y + x + c) as f64).sin() + 1.0
            } else {
                ((y + x + c) as f64).sin()
            }
        });
        let pa = tape.constant(patchify(&img_a, 16).unwrap());
        let pb = tape.constant(patchify(&img_b, 16).unwrap());
        let ta = enc.embed(&mut tape, &bind, pa).unwrap();
        let tb = enc.embed(&mut tape, &bind, pb).unwrap();
        let (va, vb) = (tape.value(ta).data(), tape.value(tb).data());
        // rows 0 (cls) and 1 (first patch) identical, row 2 differs
        assert_eq!(&va[..16], &vb[..16]);
        assert!(va[16..24].iter().zip(&vb[16..24]).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_depth_encode_equals_embed_and_layers_differ() {
        let mut cfg = micro_cfg();
        cfg.depth = 0;
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(2, 0.02);
        let enc = Encoder::new(&mut store, &mut init, "vit.R", &cfg);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let img = image(32, 16, |y, x, c| ((y * x + c) as f64).cos());
        let tokens = enc.encode(&mut tape, &bind, &img, None).unwrap();
        let patches = tape.constant(patchify(&img, 16).unwrap());
        let emb = enc.embed(&mut tape, &bind, patches).unwrap();
        let emb_ln = tape
            .layer_norm(emb, bind[enc.lnf_g.0], bind[enc.lnf_b.0], LN_EPS)
            .unwrap();
        assert_eq!(tape.value(tokens).data(), tape.value(emb_ln).data());

        // k=1 vs k=2 differ for random weights
        let cfg2 = micro_cfg();
        let mut store2 = ParamStore::<f64>::new();
        let mut init2 = Init::new(3, 0.5);
        let enc2 = Encoder::new(&mut store2, &mut init2, "vit.R", &cfg2);
        let mut tape2 = Tape::new();
        let bind2 = store2.bind(&mut tape2);
        let t1 = enc2.encode_to_layer(&mut tape2, &bind2, &img, 1, None).unwrap();
        let t2 = enc2.encode_to_layer(&mut tape2, &bind2, &img, 2, None).unwrap();
        assert_ne!(tape2.value(t1).data(), tape2.value(t2).data());
        assert!(enc2.encode_to_layer(&mut tape2, &bind2, &img, 3, None).is_err());
    }

    #[test]
    fn zeroed_block_weights_make_blocks_identity() {
        let cfg = micro_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(4, 0.5);
        let enc = Encoder::new(&mut store, &mut init, "vit.R", &cfg);
        for blk in &enc.blocks {
            store.get_mut(blk.wo).data_mut().fill(0.0);
            store.get_mut(blk.w2).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let img = image(32, 16, |y, x, c| ((y + 2 * x + c) as f64).sin());
        let full = enc.encode(&mut tape, &bind, &img, None).unwrap();
        let patches = tape.constant(patchify(&img, 16).unwrap());
        let emb = enc.embed(&mut tape, &bind, patches).unwrap();
        let emb_ln = tape
            .layer_norm(emb, bind[enc.lnf_g.0], bind[enc.lnf_b.0], LN_EPS)
            .unwrap();
        let (vf, ve) = (tape.value(full).data(), tape.value(emb_ln).data());
        for (a, b) in vf.iter().zip(ve) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_split_roundtrip_is_lossless() {
        let mut tape = Tape::<f64>::new();
        let tokens = tape.leaf(
            Array::matrix(4, 3, (0..12).map(|i| i as f64).collect()).unwrap(),
            true,
        );
        let (cls, patches) = split_tokens(&mut tape, tokens).unwrap();
        let joined = tape.concat(&[cls, patches], 0).unwrap();
        assert_eq!(tape.value(joined).data(), tape.value(tokens).data());
    }
}
