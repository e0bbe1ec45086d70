//! Token mixers: pooling attention, the PAT block, and two baselines
//! (plain 3x3 average pooling, conventional single-head attention).
//!
//! All functions are tape composites over `[D, h, w]` feature maps and
//! preserve the input shape.

use crate::tape::{Tape, VarId};
use crate::tensor::Real;
use crate::Result;

/// Depthwise 3x3 projection weights: `w` is `[D,3,3]`, `b` is `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWires {
    pub w: VarId,
    pub b: VarId,
}

/// Layer-norm affine weights, each `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct LnWires {
    pub gamma: VarId,
    pub beta: VarId,
}

/// Trailing-axis linear weights: `w` is `[In,Out]`, `b` is `[Out]`.
#[derive(Debug, Clone, Copy)]
pub struct DenseWires {
    pub w: VarId,
    pub b: VarId,
}

/// The three depthwise projections of a PoolAttn module plus the
/// embedding factorization D = dh * dw.
#[derive(Debug, Clone, Copy)]
pub struct PoolAttnWires {
    pub proj1: ConvWires,
    pub proj2: ConvWires,
    pub proj3: ConvWires,
    pub dh: usize,
    pub dw: usize,
}

/// Single-head attention weights, four `[D,D]` maps with `[D]` biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWires {
    pub q: DenseWires,
    pub k: DenseWires,
    pub v: DenseWires,
    pub o: DenseWires,
}

#[derive(Debug, Clone, Copy)]
pub enum MixerWires {
    PoolAttn(PoolAttnWires),
    Pooling,
    Attention(AttentionWires),
}

/// One pre-norm residual transformer block: mixer branch then MLP branch.
#[derive(Debug, Clone, Copy)]
pub struct BlockWires {
    pub ln1: LnWires,
    pub mixer: MixerWires,
    pub ln2: LnWires,
    pub mlp1: DenseWires,
    pub mlp2: DenseWires,
}

/// Closest-to-square factor pair (dh, dw) with dh <= dw and dh * dw = d.
pub fn closest_square_factors(d: usize) -> (usize, usize) {
    let mut dh = (d as f64).sqrt() as usize;
    while dh > 1 && d % dh != 0 {
        dh -= 1;
    }
    (dh.max(1), d / dh.max(1))
}

/// Patch-wise pooling attention: per channel, the outer product of the
/// row means and the column means of that channel's h x w map.
pub fn patchwise_pool_attention(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let x_ph = tape.axis_mean(x, 2)?; // [D, h, 1]
    let x_pw = tape.axis_mean(x, 1)?; // [D, 1, w]
    tape.matmul(x_ph, x_pw) // [D, h, w]
}

/// Embed-wise pooling attention: reshape to [N, dh, dw] patches (channel d
/// maps to row d / dw, column d % dw), outer-product the per-patch axis
/// means, and reshape back to [D, h, w].
pub fn embedwise_pool_attention(tape: &mut Tape, x: VarId, dh: usize, dw: usize) -> Result<VarId> {
    let (d, h, w) = tape.value(x).dhw()?;
    if dh * dw != d {
        return Err(crate::Error::Shape(format!(
            "embed factorization {dh}x{dw} does not match {d} channels"
        )));
    }
    let n = h * w;
    let tokens = tape.permute(x, &[1, 2, 0])?; // [h, w, D]
    let patches = tape.reshape(tokens, &[n, dh, dw])?;
    let p_dh = tape.axis_mean(patches, 2)?; // [N, dh, 1]
    let p_dw = tape.axis_mean(patches, 1)?; // [N, 1, dw]
    let attn = tape.matmul(p_dh, p_dw)?; // [N, dh, dw]
    let back = tape.reshape(attn, &[h, w, d])?;
    tape.permute(back, &[2, 0, 1])
}

/// PoolAttn: Proj3(Proj1(patch attention) + Proj2(embed attention)), all
/// three projections depthwise 3x3. The caller layer-normalizes the input.
pub fn poolattn(tape: &mut Tape, x: VarId, p: &PoolAttnWires) -> Result<VarId> {
    let x1 = patchwise_pool_attention(tape, x)?;
    let x3 = embedwise_pool_attention(tape, x, p.dh, p.dw)?;
    let a = tape.depthwise_conv3x3(x1, p.proj1.w, p.proj1.b)?;
    let b = tape.depthwise_conv3x3(x3, p.proj2.w, p.proj2.b)?;
    let fused = tape.add(a, b)?;
    tape.depthwise_conv3x3(fused, p.proj3.w, p.proj3.b)
}

/// Baseline mixer: 3x3 average pooling minus the input.
pub fn pooling_mixer(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let pooled = tape.avgpool3x3(x)?;
    tape.sub(pooled, x)
}

/// Baseline mixer: single-head scaled dot-product attention over the
/// N = h * w token sequence.
pub fn attention_mixer(tape: &mut Tape, x: VarId, p: &AttentionWires) -> Result<VarId> {
    let (d, h, w) = tape.value(x).dhw()?;
    let n = h * w;
    let tok = tape.permute(x, &[1, 2, 0])?;
    let tok = tape.reshape(tok, &[n, d])?;
    let q = tape.linear(tok, p.q.w, p.q.b)?;
    let k = tape.linear(tok, p.k.w, p.k.b)?;
    let v = tape.linear(tok, p.v.w, p.v.b)?;
    let kt = tape.permute(k, &[1, 0])?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as Real).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    let ctx = tape.matmul(weights, v)?;
    let out = tape.linear(ctx, p.o.w, p.o.b)?;
    let out = tape.reshape(out, &[h, w, d])?;
    tape.permute(out, &[2, 0, 1])
}

fn apply_mixer(tape: &mut Tape, x: VarId, mixer: &MixerWires) -> Result<VarId> {
    match mixer {
        MixerWires::PoolAttn(p) => poolattn(tape, x, p),
        MixerWires::Pooling => pooling_mixer(tape, x),
        MixerWires::Attention(p) => attention_mixer(tape, x, p),
    }
}

/// Per-position MLP with hidden width 4D: mlp2(gelu(mlp1(LN(x)))).
fn mlp(tape: &mut Tape, x: VarId, mlp1: &DenseWires, mlp2: &DenseWires) -> Result<VarId> {
    let (d, h, w) = tape.value(x).dhw()?;
    let tok = tape.permute(x, &[1, 2, 0])?;
    let hidden = tape.linear(tok, mlp1.w, mlp1.b)?;
    let act = tape.gelu(hidden);
    let out = tape.linear(act, mlp2.w, mlp2.b)?;
    debug_assert_eq!(tape.shape(out), [h, w, d]);
    tape.permute(out, &[2, 0, 1])
}

/// Pre-norm residual block:
/// x_attn = mixer(LN(x)) + x; x_out = MLP(LN(x_attn)) + x_attn.
pub fn transformer_block(tape: &mut Tape, x: VarId, blk: &BlockWires) -> Result<VarId> {
    let eps = crate::backbone::LN_EPS;
    let normed = tape.layer_norm(x, blk.ln1.gamma, blk.ln1.beta, eps)?;
    let mixed = apply_mixer(tape, normed, &blk.mixer)?;
    let x_attn = tape.add(mixed, x)?;
    let normed2 = tape.layer_norm(x_attn, blk.ln2.gamma, blk.ln2.beta, eps)?;
    let ff = mlp(tape, normed2, &blk.mlp1, &blk.mlp2)?;
    tape.add(ff, x_attn)
}

/// PAT block: `transformer_block` with a PoolAttn mixer.
pub fn pat_block(tape: &mut Tape, x: VarId, blk: &BlockWires) -> Result<VarId> {
    debug_assert!(matches!(blk.mixer, MixerWires::PoolAttn(_)));
    transformer_block(tape, x, blk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn identity_proj(tape: &mut Tape, d: usize) -> ConvWires {
        let mut w = Tensor::zeros(&[d, 3, 3]);
        for c in 0..d {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        ConvWires { w: tape.constant(w), b: tape.constant(Tensor::zeros(&[d])) }
    }

    fn zero_proj(tape: &mut Tape, d: usize) -> ConvWires {
        ConvWires {
            w: tape.constant(Tensor::zeros(&[d, 3, 3])),
            b: tape.constant(Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn factor_pairs_closest_to_square() {
        assert_eq!(closest_square_factors(64), (8, 8));
        assert_eq!(closest_square_factors(128), (8, 16));
        assert_eq!(closest_square_factors(320), (16, 20));
        assert_eq!(closest_square_factors(512), (16, 32));
        assert_eq!(closest_square_factors(1), (1, 1));
        assert_eq!(closest_square_factors(7), (1, 7));
    }

    #[test]
    fn patchwise_hand_example() {
        // D=1, X0=[[1,2],[3,4]] -> [[3,4.5],[7,10.5]]
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = patchwise_pool_attention(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &t(&[1, 2, 2], &[3.0, 4.5, 7.0, 10.5]));
    }

    #[test]
    fn patchwise_constant_channel_squares() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 1.5));
        let y = patchwise_pool_attention(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[2, 3, 4], 2.25));

        let z = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let yz = patchwise_pool_attention(&mut tape, z).unwrap();
        assert_eq!(tape.value(yz), &Tensor::zeros(&[2, 3, 4]));
    }

    #[test]
    fn patchwise_is_channel_local() {
        // Permuting channels permutes the output identically.
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..12).map(|i| (i as Real) * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[3, 2, 2], &data));
        let y = patchwise_pool_attention(&mut tape, x).unwrap();
        let mut swapped = data.clone();
        swapped.rotate_left(4); // channel order (1, 2, 0)
        let xs = tape.constant(t(&[3, 2, 2], &swapped));
        let ys = patchwise_pool_attention(&mut tape, xs).unwrap();
        let y_vals = tape.value(y).data().to_vec();
        let ys_vals = tape.value(ys).data().to_vec();
        assert_eq!(&ys_vals[..8], &y_vals[4..]);
        assert_eq!(&ys_vals[8..], &y_vals[..4]);
    }

    #[test]
    fn patchwise_rank_one_exact() {
        // Each channel of the output is bitwise the outer product of the
        // channel's row means and column means.
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..24).map(|i| ((i * 37) % 11) as Real * 0.3 - 1.0).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = patchwise_pool_attention(&mut tape, x).unwrap();
        let xv = tape.value(x).clone();
        let yv = tape.value(y).clone();
        for c in 0..2 {
            for i in 0..3 {
                let row_mean: Real = (0..4).map(|j| xv.at(&[c, i, j])).sum::<Real>() / 4.0;
                for j in 0..4 {
                    let col_mean: Real = (0..3).map(|r| xv.at(&[c, r, j])).sum::<Real>() / 3.0;
                    assert_eq!(yv.at(&[c, i, j]), row_mean * col_mean);
                }
            }
        }
    }

    #[test]
    fn embedwise_hand_example() {
        // N=1, D=4, dh=dw=2, patch [1,2,3,4] -> [3,4.5,7,10.5]
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = embedwise_pool_attention(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &t(&[4, 1, 1], &[3.0, 4.5, 7.0, 10.5]));
    }

    #[test]
    fn embedwise_constant_patch_squares() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 2, 2], -0.5));
        let y = embedwise_pool_attention(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[4, 2, 2], 0.25));
    }

    #[test]
    fn embedwise_patches_are_independent() {
        // Two patches evaluated together match single-patch evaluation.
        let mut tape = Tape::new();
        let p0 = [0.3, -1.0, 2.0, 0.7];
        let p1 = [1.1, 0.2, -0.4, 3.0];
        // [D=4, h=1, w=2]: channel-major layout interleaves the patches.
        let mut data = vec![0.0; 8];
        for c in 0..4 {
            data[c * 2] = p0[c];
            data[c * 2 + 1] = p1[c];
        }
        let x = tape.constant(t(&[4, 1, 2], &data));
        let y = embedwise_pool_attention(&mut tape, x, 2, 2).unwrap();

        for (slot, patch) in [(0usize, p0), (1usize, p1)] {
            let single = tape.constant(t(&[4, 1, 1], &patch));
            let ys = embedwise_pool_attention(&mut tape, single, 2, 2).unwrap();
            let combined = tape.value(y).clone();
            let alone = tape.value(ys).clone();
            for c in 0..4 {
                assert_eq!(combined.at(&[c, 0, slot]), alone.at(&[c, 0, 0]));
            }
        }
    }

    #[test]
    fn embedwise_rejects_bad_factorization() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 1, 1]));
        assert!(embedwise_pool_attention(&mut tape, x, 3, 2).is_err());
    }

    #[test]
    fn poolattn_identity_projections_hand_example() {
        // D=1 with identity projections: X1 + X3 where X3 is the per-patch
        // square; [[3+1, 4.5+4],[7+9, 10.5+16]].
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = PoolAttnWires {
            proj1: identity_proj(&mut tape, 1),
            proj2: identity_proj(&mut tape, 1),
            proj3: identity_proj(&mut tape, 1),
            dh: 1,
            dw: 1,
        };
        let y = poolattn(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &t(&[1, 2, 2], &[4.0, 8.5, 16.0, 26.5]));
    }

    #[test]
    fn poolattn_zero_input_zero_bias_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2, 2]));
        let p = PoolAttnWires {
            proj1: zero_proj(&mut tape, 4),
            proj2: zero_proj(&mut tape, 4),
            proj3: zero_proj(&mut tape, 4),
            dh: 2,
            dw: 2,
        };
        let y = poolattn(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[4, 2, 2]));
    }

    #[test]
    fn poolattn_zero_proj3_weights_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let beta3 = 0.75;
        let proj3 = ConvWires {
            w: tape.constant(Tensor::zeros(&[1, 3, 3])),
            b: tape.constant(Tensor::full(&[1], beta3)),
        };
        let p = PoolAttnWires {
            proj1: identity_proj(&mut tape, 1),
            proj2: identity_proj(&mut tape, 1),
            proj3,
            dh: 1,
            dw: 1,
        };
        let y = poolattn(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 2, 2], beta3));
    }

    fn zero_block(tape: &mut Tape, d: usize) -> BlockWires {
        let ln = |tape: &mut Tape| LnWires {
            gamma: tape.constant(Tensor::ones(&[d])),
            beta: tape.constant(Tensor::zeros(&[d])),
        };
        let (dh, dw) = closest_square_factors(d);
        BlockWires {
            ln1: ln(tape),
            mixer: MixerWires::PoolAttn(PoolAttnWires {
                proj1: zero_proj(tape, d),
                proj2: zero_proj(tape, d),
                proj3: zero_proj(tape, d),
                dh,
                dw,
            }),
            ln2: ln(tape),
            mlp1: DenseWires {
                w: tape.constant(Tensor::zeros(&[d, 4 * d])),
                b: tape.constant(Tensor::zeros(&[4 * d])),
            },
            mlp2: DenseWires {
                w: tape.constant(Tensor::zeros(&[4 * d, d])),
                b: tape.constant(Tensor::zeros(&[d])),
            },
        }
    }

    #[test]
    fn zero_weight_pat_block_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..32).map(|i| (i as Real) * 0.1 - 1.5).collect();
        let x = tape.constant(t(&[2, 4, 4], &data));
        let blk = zero_block(&mut tape, 2);
        let y = pat_block(&mut tape, x, &blk).unwrap();
        assert_eq!(tape.value(y), &t(&[2, 4, 4], &data));
    }

    #[test]
    fn pat_block_preserves_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[8, 4, 4], 0.3));
        let blk = zero_block(&mut tape, 8);
        let y = pat_block(&mut tape, x, &blk).unwrap();
        assert_eq!(tape.shape(y), [8, 4, 4]);
    }

    #[test]
    fn pooling_mixer_constant_interior_zero() {
        let mut tape = Tape::new();
        let c = 2.0;
        let x = tape.constant(Tensor::full(&[1, 5, 5], c));
        let y = pooling_mixer(&mut tape, x).unwrap();
        let yv = tape.value(y).clone();
        // interior: pool of a constant is the constant, residual cancels
        assert_eq!(yv.at(&[0, 2, 2]), 0.0);
        // border: zero padding shrinks the average (6 of 9 taps), corner 4 of 9
        assert!((yv.at(&[0, 0, 2]) - (6.0 * c / 9.0 - c)).abs() < 1e-15);
        assert!((yv.at(&[0, 0, 0]) - (4.0 * c / 9.0 - c)).abs() < 1e-15);

        let z = tape.constant(Tensor::zeros(&[1, 5, 5]));
        let yz = pooling_mixer(&mut tape, z).unwrap();
        assert_eq!(tape.value(yz), &Tensor::zeros(&[1, 5, 5]));
    }

    fn attention_wires(tape: &mut Tape, d: usize, wq_zero: bool) -> AttentionWires {
        let mut rng = crate::rng::Rng::new(99);
        let mut dense = |tape: &mut Tape, zero: bool| {
            let w = if zero {
                Tensor::zeros(&[d, d])
            } else {
                Tensor::new(&[d, d], (0..d * d).map(|_| rng.uniform_in(-0.5, 0.5)).collect()).unwrap()
            };
            let b = Tensor::new(&[d], (0..d).map(|_| rng.uniform_in(-0.1, 0.1)).collect()).unwrap();
            DenseWires { w: tape.constant(w), b: tape.constant(b) }
        };
        AttentionWires {
            q: dense(tape, wq_zero),
            k: dense(tape, wq_zero),
            v: dense(tape, false),
            o: dense(tape, false),
        }
    }

    #[test]
    fn attention_zero_qk_is_uniform() {
        // Wq = Wk = 0 makes every attention row uniform, so each token's
        // output is Wo . (mean of V tokens) + bo.
        let d = 3;
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..12).map(|i| (i as Real) * 0.25 - 1.0).collect();
        let x = tape.constant(t(&[d, 2, 2], &data));
        let p = attention_wires(&mut tape, d, true);
        let y = attention_mixer(&mut tape, x, &p).unwrap();

        // oracle: mean token -> v -> o
        let tok = tape.permute(x, &[1, 2, 0]).unwrap();
        let tok = tape.reshape(tok, &[4, d]).unwrap();
        let mean_tok = tape.axis_mean(tok, 0).unwrap();
        let v = tape.linear(mean_tok, p.v.w, p.v.b).unwrap();
        let o = tape.linear(v, p.o.w, p.o.b).unwrap();
        let expect = tape.value(o).clone();
        let yv = tape.value(y).clone();
        for c in 0..d {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((yv.at(&[c, i, j]) - expect.at(&[0, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_single_token_path() {
        let d = 4;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[d, 1, 1], &[0.5, -1.0, 2.0, 0.1]));
        let p = attention_wires(&mut tape, d, false);
        let y = attention_mixer(&mut tape, x, &p).unwrap();

        let tok = tape.reshape(x, &[1, d]).unwrap();
        let v = tape.linear(tok, p.v.w, p.v.b).unwrap();
        let o = tape.linear(v, p.o.w, p.o.b).unwrap();
        let expect = tape.value(o).clone();
        let yv = tape.value(y).clone();
        for c in 0..d {
            assert!((yv.at(&[c, 0, 0]) - expect.at(&[0, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let d = 2;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[d, 2, 1], &[0.3, 1.2, -0.7, 0.4]));
        let p = attention_wires(&mut tape, d, false);
        let tok = tape.permute(x, &[1, 2, 0]).unwrap();
        let tok = tape.reshape(tok, &[2, d]).unwrap();
        let q = tape.linear(tok, p.q.w, p.q.b).unwrap();
        let k = tape.linear(tok, p.k.w, p.k.b).unwrap();
        let kt = tape.permute(k, &[1, 0]).unwrap();
        let logits = tape.matmul(q, kt).unwrap();
        let scaled = tape.scale(logits, 1.0 / (d as Real).sqrt());
        let weights = tape.softmax(scaled, 1).unwrap();
        for row in 0..2 {
            let s: Real = (0..2).map(|j| tape.value(weights).at(&[row, j])).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }
}
