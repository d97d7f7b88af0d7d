//! Finite-difference gradient verification, used by test suites only.
//!
//! The oracle never touches the reverse pass: it re-runs the forward build
//! with perturbed inputs and forms central differences, then compares those
//! against whatever `Tape::backward` produced.

use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Central-difference gradient of `eval` with respect to every element of
/// every input tensor.
pub fn finite_diff<F>(inputs: &[Tensor<f64>], eps: f64, mut eval: F) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape().to_vec());
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work);
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Builds the scalar-loss graph once for the reverse pass and repeatedly for
/// the oracle, then compares gradients elementwise with the scaled tolerance
/// `|a - n| <= tol * max(1, |a|, |n|)`.
///
/// Inputs without a recorded gradient are compared against zero.
pub fn check_grads<B>(inputs: &[Tensor<f64>], eps: f64, tol: f64, build: B) -> Result<(), String>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value_of(loss).item().expect("loss must be scalar")
    };
    let numeric = finite_diff(inputs, eps, eval);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).map_err(|e| e.to_string())?;

    for (ti, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[ti].shape().to_vec());
        let analytic = tape.grad_of(*var).unwrap_or(&zero);
        compare_grads(analytic, &numeric[ti], tol, &format!("input {ti}"))?;
    }
    Ok(())
}

fn compare_grads(
    analytic: &Tensor<f64>,
    numeric: &Tensor<f64>,
    tol: f64,
    what: &str,
) -> Result<(), String> {
    for ei in 0..numeric.numel() {
        let a = analytic.data()[ei];
        let n = numeric.data()[ei];
        let scale = 1.0f64.max(a.abs()).max(n.abs());
        if (a - n).abs() > tol * scale {
            return Err(format!(
                "gradient mismatch on {what} element {ei}: analytic {a} vs numeric {n} (tol {tol})"
            ));
        }
    }
    Ok(())
}

/// Finite-difference check of precomputed parameter gradients.
/// `set_and_eval` must write the given tensors into the model parameters and
/// return the forward loss; it is also used to restore the original values.
pub fn check_param_grads<F>(
    param_values: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    mut set_and_eval: F,
) -> Result<(), String>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if analytic.len() != param_values.len() {
        return Err(format!("{} gradients for {} parameters", analytic.len(), param_values.len()));
    }
    let numeric = finite_diff(param_values, eps, &mut set_and_eval);
    set_and_eval(param_values); // restore originals
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        compare_grads(a, n, tol, &format!("parameter {pi}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Canned check suites shared by the unit and acceptance tests
// ---------------------------------------------------------------------------

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{
    BinaryDomainHead, DomainClassDiscriminator, EmbeddingNet, PredictorHead, VectorEmbeddingNet,
};
use crate::tensor::Parameter;

/// Values bounded away from zero so ReLU kinks and pooling ties cannot sit
/// inside the difference stencil.
fn smooth_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_range(0..2) == 0 {
            mag
        } else {
            -mag
        }
    })
}

fn positive_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..1.0))
}

/// Finite-difference verification of every differentiable tape operation.
pub fn run_op_checks(eps: f64, tol: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0ffee);

    // linear
    let inputs = vec![
        smooth_tensor(vec![3, 4], &mut rng),
        smooth_tensor(vec![4, 5], &mut rng),
        smooth_tensor(vec![5], &mut rng),
    ];
    check_grads(&inputs, eps, tol, |tape, v| {
        let y = tape.linear(v[0], v[1], v[2]).unwrap();
        let sm = tape.softmax(y).unwrap();
        tape.cross_entropy(sm, &[0, 2, 4]).unwrap()
    })
    .map_err(|e| format!("linear: {e}"))?;

    // conv2d
    let inputs = vec![
        smooth_tensor(vec![2, 2, 6, 7], &mut rng),
        smooth_tensor(vec![3, 2, 5, 5], &mut rng),
        smooth_tensor(vec![3], &mut rng),
    ];
    check_grads(&inputs, eps, tol, |tape, v| {
        let y = tape.conv2d(v[0], v[1], v[2]).unwrap();
        let r = tape.relu(y);
        let b = tape.value_of(r).shape()[0];
        let flat = tape.reshape(r, vec![b, 3 * 2 * 3]).unwrap();
        let sm = tape.softmax(flat).unwrap();
        tape.cross_entropy(sm, &[1, 7]).unwrap()
    })
    .map_err(|e| format!("conv2d: {e}"))?;

    // maxpool2 (values distinct with overwhelming margin)
    let inputs = vec![smooth_tensor(vec![2, 3, 4, 4], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let y = tape.maxpool2(v[0]).unwrap();
        let b = tape.value_of(y).shape()[0];
        let flat = tape.reshape(y, vec![b, 3 * 4]).unwrap();
        let sm = tape.softmax(flat).unwrap();
        tape.cross_entropy(sm, &[0, 5]).unwrap()
    })
    .map_err(|e| format!("maxpool2: {e}"))?;

    // relu
    let inputs = vec![smooth_tensor(vec![4, 6], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let r = tape.relu(v[0]);
        let sm = tape.softmax(r).unwrap();
        tape.cross_entropy(sm, &[2, 0, 5, 3]).unwrap()
    })
    .map_err(|e| format!("relu: {e}"))?;

    // softmax consumed by a non-fused downstream op
    let inputs = vec![smooth_tensor(vec![3, 5], &mut rng), smooth_tensor(vec![5, 2], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let sm = tape.softmax(v[0]).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let y = tape.linear(sm, v[1], b).unwrap();
        let sm2 = tape.softmax(y).unwrap();
        tape.cross_entropy(sm2, &[0, 1, 0]).unwrap()
    })
    .map_err(|e| format!("softmax: {e}"))?;

    // concat
    let inputs = vec![smooth_tensor(vec![3, 2], &mut rng), smooth_tensor(vec![3, 4], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let c = tape.concat(v[0], v[1]).unwrap();
        let sm = tape.softmax(c).unwrap();
        tape.cross_entropy(sm, &[0, 3, 5]).unwrap()
    })
    .map_err(|e| format!("concat: {e}"))?;

    // cross-entropy, direct path on raw probabilities
    let mut probs = positive_tensor(vec![3, 4], &mut rng);
    for r in 0..3 {
        let row = &mut probs.data_mut()[r * 4..(r + 1) * 4];
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    check_grads(&[probs], eps, tol, |tape, v| tape.cross_entropy(v[0], &[0, 1, 3]).unwrap())
        .map_err(|e| format!("cross_entropy direct: {e}"))?;

    // cross-entropy, fused log-softmax path (gradient lands on the logits)
    let inputs = vec![smooth_tensor(vec![4, 6], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let sm = tape.softmax(v[0]).unwrap();
        tape.cross_entropy(sm, &[5, 0, 2, 2]).unwrap()
    })
    .map_err(|e| format!("cross_entropy fused: {e}"))?;

    // add and scale
    let inputs = vec![smooth_tensor(vec![2, 3], &mut rng), smooth_tensor(vec![2, 3], &mut rng)];
    check_grads(&inputs, eps, tol, |tape, v| {
        let s = tape.add(v[0], v[1]).unwrap();
        let sc = tape.scale(s, 0.37);
        let sm = tape.softmax(sc).unwrap();
        tape.cross_entropy(sm, &[1, 2]).unwrap()
    })
    .map_err(|e| format!("add/scale: {e}"))?;

    // the spec's random two-layer network
    let inputs = vec![
        smooth_tensor(vec![3, 5], &mut rng),
        smooth_tensor(vec![5, 7], &mut rng),
        smooth_tensor(vec![7], &mut rng),
        smooth_tensor(vec![7, 4], &mut rng),
        smooth_tensor(vec![4], &mut rng),
    ];
    check_grads(&inputs, eps, tol, |tape, v| {
        let h = tape.linear(v[0], v[1], v[2]).unwrap();
        let r = tape.relu(h);
        let o = tape.linear(r, v[3], v[4]).unwrap();
        let sm = tape.softmax(o).unwrap();
        tape.cross_entropy(sm, &[0, 3, 1]).unwrap()
    })
    .map_err(|e| format!("two-layer net: {e}"))?;

    Ok(())
}

fn param_tensors<E: crate::tensor::Scalar>(params: &[&Parameter<E>]) -> Vec<Tensor<f64>> {
    params.iter().map(|p| p.value().cast()).collect()
}

fn load_params(params: &mut [&mut Parameter<f64>], values: &[Tensor<f64>]) {
    for (p, v) in params.iter_mut().zip(values) {
        p.value_mut().data_mut().copy_from_slice(v.data());
    }
}

fn grads_of(params: &[&Parameter<f64>]) -> Vec<Tensor<f64>> {
    params.iter().map(|p| p.grad().clone()).collect()
}

/// Finite-difference verification of the composite training losses on
/// networks well under 5k parameters.
pub fn run_composite_loss_checks(eps: f64, tol: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfadaf00d);

    // mini networks
    let mut g: VectorEmbeddingNet<f64> = VectorEmbeddingNet::init(1, 6, 8, 5);
    let mut h: PredictorHead<f64> = PredictorHead::init(1, 5, 4);
    let mut d: DomainClassDiscriminator<f64> = DomainClassDiscriminator::init(1, 5);
    let mut dbin: BinaryDomainHead<f64> = BinaryDomainHead::init(1, 5);
    let total: usize = g
        .params()
        .iter()
        .chain(h.params().iter())
        .chain(d.params().iter())
        .chain(dbin.params().iter())
        .map(|p| p.value().numel())
        .sum();
    assert!(total <= 5000, "mini networks must stay under 5k parameters, got {total}");

    let xs = smooth_tensor(vec![4, 6], &mut rng);
    let ys = [0u8, 1, 2, 3];
    let xt = smooth_tensor(vec![4, 6], &mut rng);
    let yt = [3u8, 2, 1, 0];
    let x2a = smooth_tensor(vec![3, 6], &mut rng);
    let x2b = smooth_tensor(vec![3, 6], &mut rng);
    let x4a = smooth_tensor(vec![3, 6], &mut rng);
    let x4b = smooth_tensor(vec![3, 6], &mut rng);
    let gamma = 0.7;

    // Eq. 1: classification loss through h(g(x)), gradients in g and h
    {
        let values: Vec<Tensor<f64>> = param_tensors(&g.params())
            .into_iter()
            .chain(param_tensors(&h.params()))
            .collect();
        let build = |g: &EitherRef<'_>, tape: &mut Tape<f64>| -> Var {
            let (g, h, _, _) = g.nets();
            let enc = g.bind(tape);
            let head = h.bind(tape);
            let x = tape.leaf(xs.clone());
            let z = enc.forward(tape, x).unwrap();
            let p = head.forward(tape, z).unwrap();
            tape.cross_entropy(p, &ys).unwrap()
        };
        let mut ctx = EitherRef { g: &mut g, h: &mut h, d: &mut d, dbin: &mut dbin };
        check_param_grads(
            &values,
            eps,
            tol,
            |vals| {
                let (split_g, split_h) = vals.split_at(4);
                load_params(&mut ctx.g.params_mut(), split_g);
                load_params(&mut ctx.h.params_mut(), split_h);
                let mut tape = Tape::new();
                let loss = build(&ctx, &mut tape);
                tape.value_of(loss).item().unwrap()
            },
            || {
                let mut tape = Tape::new();
                let enc = ctx.g.bind(&mut tape);
                let head = ctx.h.bind(&mut tape);
                let x = tape.leaf(xs.clone());
                let z = enc.forward(&mut tape, x).unwrap();
                let p = head.forward(&mut tape, z).unwrap();
                let loss = tape.cross_entropy(p, &ys).unwrap();
                tape.backward(loss).unwrap();
                ctx.g.write_grads(&tape, &enc);
                ctx.h.write_grads(&tape, &head);
                let mut out = grads_of(&ctx.g.params());
                out.extend(grads_of(&ctx.h.params()));
                out
            },
        )
        .map_err(|e| format!("classification loss: {e}"))?;
    }

    // Eq. 3: four-way discriminator loss, gradients in D and both embeddings
    {
        let za = smooth_tensor(vec![4, 5], &mut rng);
        let zb = smooth_tensor(vec![4, 5], &mut rng);
        let groups = [1u8, 2, 3, 4];
        let values: Vec<Tensor<f64>> = param_tensors(&d.params())
            .into_iter()
            .chain([za.clone(), zb.clone()])
            .collect();
        check_param_grads(
            &values,
            eps,
            tol,
            |vals| {
                load_params(&mut d.params_mut(), &vals[..4]);
                let mut tape = Tape::new();
                let va = tape.leaf(vals[4].clone());
                let vb = tape.leaf(vals[5].clone());
                let bound = d.bind(&mut tape);
                let loss = crate::train::dcd_loss(&mut tape, &bound, va, vb, &groups).unwrap();
                tape.value_of(loss).item().unwrap()
            },
            || {
                let mut tape = Tape::new();
                let va = tape.leaf(za.clone());
                let vb = tape.leaf(zb.clone());
                let bound = d.bind(&mut tape);
                let loss = crate::train::dcd_loss(&mut tape, &bound, va, vb, &groups).unwrap();
                tape.backward(loss).unwrap();
                d.write_grads(&tape, &bound);
                let mut out = grads_of(&d.params());
                out.push(tape.grad_of(va).unwrap().clone());
                out.push(tape.grad_of(vb).unwrap().clone());
                out
            },
        )
        .map_err(|e| format!("discriminator loss: {e}"))?;
    }

    // Eq. 4: confusion loss with D frozen, gradients in g only
    let confusion_graph = |g: &VectorEmbeddingNet<f64>,
                           d: &DomainClassDiscriminator<f64>,
                           tape: &mut Tape<f64>,
                           x2a: &Tensor<f64>,
                           x2b: &Tensor<f64>,
                           x4a: &Tensor<f64>,
                           x4b: &Tensor<f64>|
     -> (Var, crate::models::BoundVectorEmbedding) {
        let enc = g.bind(tape);
        let dcd = d.bind(tape);
        let (a2, b2) = (tape.leaf(x2a.clone()), tape.leaf(x2b.clone()));
        let (za2, zb2) = (enc.forward(tape, a2).unwrap(), enc.forward(tape, b2).unwrap());
        let p2 = dcd.forward(tape, za2, zb2).unwrap();
        let l2 = tape.cross_entropy(p2, &[0, 0, 0]).unwrap(); // scored as group 1
        let (a4, b4) = (tape.leaf(x4a.clone()), tape.leaf(x4b.clone()));
        let (za4, zb4) = (enc.forward(tape, a4).unwrap(), enc.forward(tape, b4).unwrap());
        let p4 = dcd.forward(tape, za4, zb4).unwrap();
        let l4 = tape.cross_entropy(p4, &[2, 2, 2]).unwrap(); // scored as group 3
        (tape.add(l2, l4).unwrap(), enc)
    };
    {
        let values = param_tensors(&g.params());
        check_param_grads(
            &values,
            eps,
            tol,
            |vals| {
                load_params(&mut g.params_mut(), vals);
                let mut tape = Tape::new();
                let (loss, _) = confusion_graph(&g, &d, &mut tape, &x2a, &x2b, &x4a, &x4b);
                tape.value_of(loss).item().unwrap()
            },
            || {
                let mut tape = Tape::new();
                let (loss, enc) = confusion_graph(&g, &d, &mut tape, &x2a, &x2b, &x4a, &x4b);
                tape.backward(loss).unwrap();
                g.write_grads(&tape, &enc);
                grads_of(&g.params())
            },
        )
        .map_err(|e| format!("confusion loss: {e}"))?;
    }

    // Eq. 5: gamma-weighted confusion plus both classification terms,
    // gradients in g and h with D frozen
    {
        let values: Vec<Tensor<f64>> = param_tensors(&g.params())
            .into_iter()
            .chain(param_tensors(&h.params()))
            .collect();
        let full_graph = |g: &VectorEmbeddingNet<f64>,
                          h: &PredictorHead<f64>,
                          d: &DomainClassDiscriminator<f64>,
                          tape: &mut Tape<f64>|
         -> (Var, crate::models::BoundVectorEmbedding, crate::models::BoundPredictor) {
            let (conf, enc) = confusion_graph(g, d, tape, &x2a, &x2b, &x4a, &x4b);
            let head = h.bind(tape);
            let x = tape.leaf(xs.clone());
            let z = enc.forward(tape, x).unwrap();
            let p = head.forward(tape, z).unwrap();
            let ce_s = tape.cross_entropy(p, &ys).unwrap();
            let x = tape.leaf(xt.clone());
            let z = enc.forward(tape, x).unwrap();
            let p = head.forward(tape, z).unwrap();
            let ce_t = tape.cross_entropy(p, &yt).unwrap();
            let weighted = tape.scale(conf, gamma);
            let partial = tape.add(weighted, ce_s).unwrap();
            (tape.add(partial, ce_t).unwrap(), enc, head)
        };
        check_param_grads(
            &values,
            eps,
            tol,
            |vals| {
                let (split_g, split_h) = vals.split_at(4);
                load_params(&mut g.params_mut(), split_g);
                load_params(&mut h.params_mut(), split_h);
                let mut tape = Tape::new();
                let (loss, _, _) = full_graph(&g, &h, &d, &mut tape);
                tape.value_of(loss).item().unwrap()
            },
            || {
                let mut tape = Tape::new();
                let (loss, enc, head) = full_graph(&g, &h, &d, &mut tape);
                tape.backward(loss).unwrap();
                g.write_grads(&tape, &enc);
                h.write_grads(&tape, &head);
                let mut out = grads_of(&g.params());
                out.extend(grads_of(&h.params()));
                out
            },
        )
        .map_err(|e| format!("combined confusion+classification loss: {e}"))?;
    }

    // Eq. 2: binary adversarial discriminator loss, gradients in the binary
    // head and in g
    {
        let values: Vec<Tensor<f64>> = param_tensors(&dbin.params())
            .into_iter()
            .chain(param_tensors(&g.params()))
            .collect();
        let binary_graph = |g: &VectorEmbeddingNet<f64>,
                            dbin: &BinaryDomainHead<f64>,
                            tape: &mut Tape<f64>|
         -> (Var, crate::models::BoundVectorEmbedding, crate::models::BoundBinaryHead) {
            let enc = g.bind(tape);
            let head = dbin.bind(tape);
            let x = tape.leaf(xs.clone());
            let z = enc.forward(tape, x).unwrap();
            let p = head.forward(tape, z).unwrap();
            let ce_s = tape.cross_entropy(p, &[0, 0, 0, 0]).unwrap();
            let x = tape.leaf(xt.clone());
            let z = enc.forward(tape, x).unwrap();
            let p = head.forward(tape, z).unwrap();
            let ce_t = tape.cross_entropy(p, &[1, 1, 1, 1]).unwrap();
            (tape.add(ce_s, ce_t).unwrap(), enc, head)
        };
        check_param_grads(
            &values,
            eps,
            tol,
            |vals| {
                let (split_d, split_g) = vals.split_at(4);
                load_params(&mut dbin.params_mut(), split_d);
                load_params(&mut g.params_mut(), split_g);
                let mut tape = Tape::new();
                let (loss, _, _) = binary_graph(&g, &dbin, &mut tape);
                tape.value_of(loss).item().unwrap()
            },
            || {
                let mut tape = Tape::new();
                let (loss, enc, head) = binary_graph(&g, &dbin, &mut tape);
                tape.backward(loss).unwrap();
                g.write_grads(&tape, &enc);
                dbin.write_grads(&tape, &head);
                let mut out = grads_of(&dbin.params());
                out.extend(grads_of(&g.params()));
                out
            },
        )
        .map_err(|e| format!("binary adversarial loss: {e}"))?;
    }

    Ok(())
}

struct EitherRef<'a> {
    g: &'a mut VectorEmbeddingNet<f64>,
    h: &'a mut PredictorHead<f64>,
    d: &'a mut DomainClassDiscriminator<f64>,
    dbin: &'a mut BinaryDomainHead<f64>,
}

impl<'a> EitherRef<'a> {
    fn nets(
        &self,
    ) -> (
        &VectorEmbeddingNet<f64>,
        &PredictorHead<f64>,
        &DomainClassDiscriminator<f64>,
        &BinaryDomainHead<f64>,
    ) {
        (self.g, self.h, self.d, self.dbin)
    }
}

/// End-to-end check of the full digit architecture: cross-entropy of
/// `h(g(x))` on a four-image batch, gradients for every parameter.
pub fn run_full_model_check(eps: f64, tol: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e_e7);
    let mut g: EmbeddingNet<f64> = EmbeddingNet::init(5);
    let mut h: PredictorHead<f64> = PredictorHead::init(5, crate::models::EMBED_DIM, 10);
    let images = positive_tensor(vec![4, 1, 16, 16], &mut rng);
    let labels = [3u8, 1, 4, 9];

    let values: Vec<Tensor<f64>> = param_tensors(&g.params())
        .into_iter()
        .chain(param_tensors(&h.params()))
        .collect();
    check_param_grads(
        &values,
        eps,
        tol,
        |vals| {
            let (split_g, split_h) = vals.split_at(8);
            load_params(&mut g.params_mut(), split_g);
            load_params(&mut h.params_mut(), split_h);
            let mut tape = Tape::new();
            let enc = g.bind(&mut tape);
            let head = h.bind(&mut tape);
            let x = tape.leaf(images.clone());
            let z = enc.forward(&mut tape, x).unwrap();
            let p = head.forward(&mut tape, z).unwrap();
            let loss = tape.cross_entropy(p, &labels).unwrap();
            tape.value_of(loss).item().unwrap()
        },
        || {
            let mut tape = Tape::new();
            let enc = g.bind(&mut tape);
            let head = h.bind(&mut tape);
            let x = tape.leaf(images.clone());
            let z = enc.forward(&mut tape, x).unwrap();
            let p = head.forward(&mut tape, z).unwrap();
            let loss = tape.cross_entropy(p, &labels).unwrap();
            tape.backward(loss).unwrap();
            g.write_grads(&tape, &enc);
            h.write_grads(&tape, &head);
            let mut out = grads_of(&g.params());
            out.extend(grads_of(&h.params()));
            out
        },
    )
}
