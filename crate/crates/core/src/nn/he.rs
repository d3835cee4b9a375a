//! Encrypted forward pass over packed slots.
//!
//! The input occupies slots `0..d`. Every layer works on a block of `n`
//! slots, `n` being the next power of two at or above the widest layer. The
//! block is first copied to slots `n..2n`, after which a left rotation by `j`
//! lines `x[(i + j) mod n]` up with slot `i`, so the padded `n x n` weight
//! matrix applies as a sum of its diagonals times rotations of the input.
//! Diagonals are grouped baby-step/giant-step: `g` rotations of the input
//! are shared by every group, and each group's partial sum is rotated once,
//! its diagonals being pre-shifted to compensate.
//!
//! Plaintext weights are encoded at the scale of the prime the following
//! rescale drops, so every layer leaves the ciphertext scale unchanged; the
//! bias is added after that rescale. A single hidden layer consumes exactly
//! three levels: matrix product, square, output product.

use rand::{CryptoRng, RngCore};

use crate::ckks::{
    CkksCiphertext, CkksContext, CkksError, EvaluationKeys, Plaintext, SecretKey, SCALE_TOLERANCE,
};

use super::{Dense, NnError, NnModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeOptions {
    /// Evaluates networks deeper than the modulus chain allows by continuing
    /// without rescaling once the levels run out. The results are not
    /// expected to be correct.
    pub unsafe_depth: bool,
}

/// Levels consumed by a network with one hidden layer.
const SAFE_DEPTH: usize = 3;

struct MatVec {
    /// `(giant shift, [(baby step, shifted diagonal)])`.
    groups: Vec<(usize, Vec<(usize, Plaintext)>)>,
    babies: Vec<usize>,
}

enum Step {
    Replicate,
    MatVec(MatVec),
    Dot(Plaintext),
    SumBlock,
    Rescale,
    AddPlain(Plaintext),
    Square,
}

/// A model with its weights encoded for ciphertexts of one level and scale.
pub struct PreparedNn {
    steps: Vec<Step>,
    block: usize,
    input_level: usize,
    input_scale: f64,
    output_level: usize,
}

fn block_size(model: &NnModel) -> usize {
    model.max_width().next_power_of_two()
}

fn baby_steps(block: usize) -> usize {
    let log = block.trailing_zeros();
    1 << log.div_ceil(2)
}

/// Rotation steps the encrypted forward pass uses. Any step without its own
/// key is composed from power-of-two keys.
pub fn rotation_steps(ctx: &CkksContext, model: &NnModel) -> Vec<usize> {
    let n = block_size(model);
    let g = baby_steps(n);
    let mut steps = vec![(ctx.slots() - n) % ctx.slots()];
    steps.extend(1..g.min(n));
    steps.extend((g..n).step_by(g));
    steps.extend((0..n.trailing_zeros()).map(|k| 1 << k));
    steps.retain(|&s| s != 0);
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// Level and scale bookkeeping while the plan is built.
struct Planner<'a> {
    ctx: &'a CkksContext,
    level: usize,
    scale: f64,
    wrapping: bool,
    steps: Vec<Step>,
}

impl Planner<'_> {
    fn encode(&self, values: &[f64], scale: f64) -> Result<Plaintext, CkksError> {
        if self.wrapping {
            self.ctx.encode_wrapping(values, self.level, scale)
        } else {
            self.ctx.encode(values, self.level, scale)
        }
    }

    /// Scale for weights multiplied in at the current level, and whether the
    /// product is rescaled.
    fn weight_scale(&self) -> (f64, bool) {
        if self.level > 0 {
            (self.ctx.chain_prime(self.level) as f64, true)
        } else {
            (self.ctx.default_scale(), false)
        }
    }

    fn after_product(&mut self, weight_scale: f64, rescale: bool) {
        self.scale *= weight_scale;
        if rescale {
            self.scale /= self.ctx.chain_prime(self.level) as f64;
            self.level -= 1;
            self.steps.push(Step::Rescale);
        }
    }

    fn matvec(&mut self, layer: &Dense, n: usize) -> Result<(), CkksError> {
        let g = baby_steps(n);
        let (ws, rescale) = self.weight_scale();
        let padded = |i: usize, j: usize| {
            if i < layer.outputs && j < layer.inputs {
                layer.weight(i, j)
            } else {
                0.0
            }
        };
        let mut groups = Vec::new();
        let mut babies = Vec::new();
        for shift in (0..n).step_by(g) {
            let mut terms = Vec::new();
            for b in 0..g.min(n - shift) {
                let j = shift + b;
                let diag: Vec<f64> = (0..n).map(|i| padded(i, (i + j) % n)).collect();
                // an all-zero matrix still needs one term to produce a ciphertext
                if diag.iter().all(|&v| v == 0.0) && j != 0 {
                    continue;
                }
                let mut shifted = vec![0.0; shift];
                shifted.extend(diag);
                terms.push((b, self.encode(&shifted, ws)?));
                babies.push(b);
            }
            if !terms.is_empty() {
                groups.push((shift, terms));
            }
        }
        babies.sort_unstable();
        babies.dedup();
        self.steps.push(Step::Replicate);
        self.steps.push(Step::MatVec(MatVec { groups, babies }));
        self.after_product(ws, rescale);
        Ok(())
    }

    fn add_bias(&mut self, bias: &[f64]) -> Result<(), CkksError> {
        let pt = self.encode(bias, self.scale)?;
        self.steps.push(Step::AddPlain(pt));
        Ok(())
    }

    fn square(&mut self) {
        self.steps.push(Step::Square);
        let rescale = self.level > 0;
        self.after_product(self.scale, rescale);
    }

    fn dot(&mut self, weights: &[f64]) -> Result<(), CkksError> {
        let (ws, rescale) = self.weight_scale();
        let pt = self.encode(weights, ws)?;
        self.steps.push(Step::Dot(pt));
        self.after_product(ws, rescale);
        self.steps.push(Step::SumBlock);
        Ok(())
    }
}

impl PreparedNn {
    /// Encodes `model` for inputs at `input_level` and `input_scale`.
    pub fn new(
        ctx: &CkksContext,
        model: &NnModel,
        input_level: usize,
        input_scale: f64,
        opts: HeOptions,
    ) -> Result<Self, NnError> {
        let hidden = model.num_hidden_layers();
        if hidden > 1 && !opts.unsafe_depth {
            return Err(NnError::UnsupportedDepth(format!(
                "{hidden} hidden layers; encrypted evaluation supports one"
            )));
        }
        let needed = 2 * hidden + 1;
        if input_level < SAFE_DEPTH.min(needed) || (input_level < needed && !opts.unsafe_depth) {
            return Err(CkksError::Depth(format!(
                "input at level {input_level}, the network needs {needed}"
            ))
            .into());
        }
        let block = block_size(model);
        if 2 * block > ctx.slots() {
            return Err(CkksError::Capacity(format!(
                "layers of width up to {block} need {} slots, the context has {}",
                2 * block,
                ctx.slots()
            ))
            .into());
        }
        let mut plan = Planner {
            ctx,
            level: input_level,
            scale: input_scale,
            wrapping: opts.unsafe_depth,
            steps: Vec::new(),
        };
        for layer in model.hidden_layers() {
            plan.matvec(layer, block)?;
            plan.add_bias(&layer.bias)?;
            plan.square();
        }
        let out = model.output_layer();
        plan.dot(&out.weights)?;
        plan.add_bias(&out.bias)?;
        Ok(PreparedNn {
            output_level: plan.level,
            steps: plan.steps,
            block,
            input_level,
            input_scale,
        })
    }

    /// Prepared for fresh ciphertexts: top level, default scale.
    pub fn for_fresh_inputs(
        ctx: &CkksContext,
        model: &NnModel,
        opts: HeOptions,
    ) -> Result<Self, NnError> {
        Self::new(ctx, model, ctx.max_level(), ctx.default_scale(), opts)
    }

    pub fn input_level(&self) -> usize {
        self.input_level
    }

    pub fn levels_consumed(&self) -> usize {
        self.input_level - self.output_level
    }

    /// Encrypted logit in slot 0.
    pub fn evaluate(
        &self,
        ctx: &CkksContext,
        ct: &CkksCiphertext,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, NnError> {
        if ct.level < self.input_level {
            return Err(CkksError::Depth(format!(
                "input at level {}, prepared for {}",
                ct.level, self.input_level
            ))
            .into());
        }
        if (ct.scale - self.input_scale).abs() > SCALE_TOLERANCE * self.input_scale {
            return Err(CkksError::Scale(format!(
                "input scale {} differs from {}",
                ct.scale, self.input_scale
            ))
            .into());
        }
        let mut cur = ctx.mod_drop(ct, self.input_level)?;
        for step in &self.steps {
            cur = match step {
                Step::Replicate => {
                    let shifted = ctx.rotate(&cur, ctx.slots() - self.block, keys)?;
                    ctx.add(&cur, &shifted)?
                }
                Step::MatVec(mv) => self.matvec(ctx, &cur, mv, keys)?,
                Step::Dot(pt) => ctx.mul_plain_unbounded(&cur, pt)?,
                Step::SumBlock => {
                    let mut acc = cur;
                    let mut s = 1;
                    while s < self.block {
                        acc = ctx.add(&acc, &ctx.rotate(&acc, s, keys)?)?;
                        s <<= 1;
                    }
                    acc
                }
                Step::Rescale => ctx.rescale(&cur)?,
                Step::AddPlain(pt) => ctx.add_plain(&cur, pt)?,
                Step::Square => ctx.mul_unbounded(&cur, &cur, keys)?,
            };
        }
        Ok(cur)
    }

    fn matvec(
        &self,
        ctx: &CkksContext,
        x: &CkksCiphertext,
        mv: &MatVec,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, CkksError> {
        let mut rotated = vec![None; mv.babies.last().map_or(0, |b| b + 1)];
        for &b in &mv.babies {
            rotated[b] = Some(ctx.rotate(x, b, keys)?);
        }
        let mut acc: Option<CkksCiphertext> = None;
        for (shift, terms) in &mv.groups {
            let mut inner: Option<CkksCiphertext> = None;
            for (b, pt) in terms {
                let term =
                    ctx.mul_plain_unbounded(rotated[*b].as_ref().expect("baby step computed"), pt)?;
                inner = Some(match inner {
                    Some(s) => ctx.add(&s, &term)?,
                    None => term,
                });
            }
            let part = ctx.rotate(&inner.expect("groups are non-empty"), *shift, keys)?;
            acc = Some(match acc {
                Some(s) => ctx.add(&s, &part)?,
                None => part,
            });
        }
        Ok(acc.expect("diagonal 0 is always present"))
    }
}

/// Prepares `model` for `ct` and evaluates it.
pub fn he_forward(
    ctx: &CkksContext,
    ct: &CkksCiphertext,
    model: &NnModel,
    keys: &EvaluationKeys,
    opts: HeOptions,
) -> Result<CkksCiphertext, NnError> {
    PreparedNn::new(ctx, model, ct.level, ct.scale, opts)?.evaluate(ctx, ct, keys)
}

/// Packs `x` into slots `0..d` at the top level and default scale, encrypted
/// under the client's secret key.
pub fn encrypt_input<R: RngCore + CryptoRng + ?Sized>(
    ctx: &CkksContext,
    sk: &SecretKey,
    x: &[f64],
    rng: &mut R,
) -> Result<CkksCiphertext, NnError> {
    let pt = ctx.encode_default(x)?;
    Ok(ctx.encrypt_symmetric(sk, &pt, rng)?)
}

pub fn decrypt_logit(
    ctx: &CkksContext,
    sk: &SecretKey,
    ct: &CkksCiphertext,
) -> Result<f64, NnError> {
    Ok(ctx.decrypt_values(sk, ct)?[0])
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use rand::Rng;

    use super::*;
    use crate::ckks::test_support::rng;
    use crate::ckks::{CkksKeySet, CkksParams};
    use crate::nn::fixtures::random_model;

    /// 2048-degree ring (1024 slots) with keys for the default steps only.
    fn setup() -> &'static (CkksContext, CkksKeySet) {
        static S: OnceLock<(CkksContext, CkksKeySet)> = OnceLock::new();
        S.get_or_init(|| {
            let ctx = CkksContext::new_insecure(CkksParams {
                n: 2048,
                ..CkksParams::default()
            })
            .unwrap();
            let keys = CkksKeySet::generate(&ctx, &mut rng(21));
            (ctx, keys)
        })
    }

    fn run(model: &NnModel, x: &[f64], opts: HeOptions) -> Result<f64, NnError> {
        let (ctx, keys) = setup();
        let ct = encrypt_input(ctx, &keys.secret, x, &mut rng(22))?;
        let out = he_forward(ctx, &ct, model, &keys.eval, opts)?;
        decrypt_logit(ctx, &keys.secret, &out)
    }

    #[test]
    fn hand_evaluated_model() {
        let m = NnModel::new(1, vec![2.0], vec![1.0], vec![3.0], 0.0).unwrap();
        assert!((run(&m, &[1.0], HeOptions::default()).unwrap() - 27.0).abs() < 1e-2);
    }

    #[test]
    fn constant_model() {
        let m = NnModel::new(3, vec![0.0; 6], vec![0.0; 2], vec![0.0; 2], -0.75).unwrap();
        assert!((run(&m, &[4.0, -2.0, 1.0], HeOptions::default()).unwrap() + 0.75).abs() < 1e-3);
    }

    #[test]
    fn matches_plaintext_forward() {
        let mut r = rng(23);
        for (widths, seed) in [(&[28, 47, 1][..], 1), (&[5, 3, 1], 2), (&[9, 16, 1], 3)] {
            let m = random_model(widths, seed);
            for _ in 0..3 {
                let x: Vec<f64> = (0..widths[0]).map(|_| r.gen_range(-10.0..10.0)).collect();
                let he = run(&m, &x, HeOptions::default()).unwrap();
                let plain = m.forward_plain(&x).unwrap();
                assert!((he - plain).abs() < 1e-2, "{widths:?}: {he} vs {plain}");
            }
        }
    }

    #[test]
    fn consumes_exactly_three_levels() {
        let (ctx, keys) = setup();
        let m = random_model(&[4, 4, 1], 4);
        let p = PreparedNn::for_fresh_inputs(ctx, &m, HeOptions::default()).unwrap();
        assert_eq!(p.levels_consumed(), 3);
        let ct = encrypt_input(ctx, &keys.secret, &[1.0; 4], &mut rng(24)).unwrap();
        assert_eq!(
            p.evaluate(ctx, &ct, &keys.eval).unwrap().level,
            ctx.max_level() - 3
        );
    }

    #[test]
    fn deeper_models_need_the_unsafe_flag() {
        let m = random_model(&[4, 4, 4, 1], 5);
        let x = [0.5, -1.0, 2.0, 1.5];
        assert!(matches!(
            run(&m, &x, HeOptions::default()),
            Err(NnError::UnsupportedDepth(_))
        ));
        // runs to completion, but the result is not the plaintext logit
        let he = run(&m, &x, HeOptions { unsafe_depth: true }).unwrap();
        assert!((he - m.forward_plain(&x).unwrap()).abs() >= 1e-2 || he.is_nan());
    }

    #[test]
    fn depth_and_capacity_errors() {
        let (ctx, keys) = setup();
        let m = random_model(&[4, 4, 1], 6);
        let ct = encrypt_input(ctx, &keys.secret, &[1.0; 4], &mut rng(25)).unwrap();
        let low = ctx.mod_drop(&ct, 2).unwrap();
        assert!(matches!(
            he_forward(ctx, &low, &m, &keys.eval, HeOptions::default()),
            Err(NnError::Ckks(CkksError::Depth(_)))
        ));
        let wide = random_model(&[4, ctx.slots(), 1], 7);
        assert!(matches!(
            PreparedNn::for_fresh_inputs(ctx, &wide, HeOptions::default()),
            Err(NnError::Ckks(CkksError::Capacity(_)))
        ));
    }

    #[test]
    fn dedicated_rotation_keys_give_the_same_result() {
        let (ctx, _) = setup();
        let m = random_model(&[6, 10, 1], 8);
        let steps = rotation_steps(ctx, &m);
        assert!(steps.contains(&(ctx.slots() - 16)));
        let keys = CkksKeySet::generate_with_steps(ctx, &steps, &mut rng(26));
        let x = [1.0, -2.0, 0.5, 3.0, -0.25, 0.0];
        let ct = encrypt_input(ctx, &keys.secret, &x, &mut rng(27)).unwrap();
        let out = he_forward(ctx, &ct, &m, &keys.eval, HeOptions::default()).unwrap();
        let he = decrypt_logit(ctx, &keys.secret, &out).unwrap();
        assert!((he - m.forward_plain(&x).unwrap()).abs() < 1e-2);
        assert!((he - run(&m, &x, HeOptions::default()).unwrap()).abs() < 1e-2);
    }
}
