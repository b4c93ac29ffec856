use offrl_core::tensor::{finite_difference_check, Graph, ParamStore, Result, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.normal(name, shape, 0.7, &mut rng);
    }
    s
}

fn check(mut s: ParamStore<f64>, f: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) {
    let r = finite_difference_check(&mut s, H, 64, f).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn matmul_bias_gelu() {
    let s = store(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], 1);
    check(s, |g, s| {
        let x = g.param(s, 0);
        let w = g.param(s, 1);
        let b = g.param(s, 2);
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        let y = g.gelu(y);
        let y = g.tanh(y);
        Ok(g.sum(y))
    });
}

#[test]
fn elementwise_ops() {
    let s = store(&[("a", &[2, 3]), ("b", &[2, 3])], 2);
    check(s, |g, s| {
        let a = g.param(s, 0);
        let b = g.param(s, 1);
        let c = g.mul(a, b)?;
        let d = g.sub(c, a)?;
        let e = g.sigmoid(d);
        let f = g.exp(b);
        let h = g.add(e, f)?;
        let h = g.affine(h, 0.3, 1.0);
        Ok(g.mean(h))
    });
}

#[test]
fn layer_norm() {
    let s = store(&[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6]), ("r", &[3, 6])], 3);
    check(s, |g, s| {
        let x = g.param(s, 0);
        let gain = g.param(s, 1);
        let bias = g.param(s, 2);
        let r = g.param(s, 3);
        let y = g.layer_norm(x, gain, bias)?;
        let y = g.mul(y, r)?;
        Ok(g.sum(y))
    });
}

#[test]
fn causal_attention() {
    let s = store(&[("q", &[4, 6]), ("k", &[4, 6]), ("v", &[4, 6]), ("r", &[4, 6])], 4);
    check(s, |g, s| {
        let q = g.param(s, 0);
        let k = g.param(s, 1);
        let v = g.param(s, 2);
        let r = g.param(s, 3);
        let y = g.causal_attention(q, k, v, 2)?;
        let y = g.mul(y, r)?;
        Ok(g.sum(y))
    });
}

#[test]
fn embed_slice_concat_reshape() {
    let s = store(&[("table", &[5, 3]), ("r", &[4, 3])], 5);
    check(s, |g, s| {
        let t = g.param(s, 0);
        let r = g.param(s, 1);
        let e = g.embed(t, &[1, 3, 3, 0])?;
        let top = g.slice_rows(e, 0, 2)?;
        let bottom = g.slice_rows(e, 2, 4)?;
        let c = g.concat_rows(&[bottom, top])?;
        let c = g.mul(c, r)?;
        let c = g.reshape(c, &[12])?;
        let c = g.tanh(c);
        Ok(g.sum(c))
    });
}

#[test]
fn softmax_gather_broadcast() {
    let s = store(&[("x", &[3, 4]), ("v", &[3]), ("r", &[3, 4])], 6);
    check(s, |g, s| {
        let x = g.param(s, 0);
        let v = g.param(s, 1);
        let r = g.param(s, 2);
        let p = g.softmax(x);
        let p = g.mul(p, r)?;
        let lp = g.log_softmax(x);
        let b = g.broadcast_cols(v, 4);
        let y = g.add(lp, b)?;
        let y = g.add(y, p)?;
        let y = g.gather(y, &[0, 3, 1])?;
        let y = g.tanh(y);
        Ok(g.sum(y))
    });
}

#[test]
fn cross_entropy_with_mask() {
    let s = store(&[("x", &[4, 5])], 7);
    check(s, |g, s| {
        let x = g.param(s, 0);
        g.cross_entropy(x, &[0, 4, 2, 1], &[1.0, 0.5, 0.0, 2.0])
    });
}

#[test]
fn kl_divergence_both_arguments() {
    let s = store(&[("p", &[3, 4]), ("q", &[3, 4])], 8);
    check(s, |g, s| {
        let p = g.param(s, 0);
        let q = g.param(s, 1);
        g.kl_divergence(p, q, &[1.0, 0.3, 2.0])
    });
}

#[test]
fn squared_and_expectile() {
    let s = store(&[("a", &[6]), ("b", &[6])], 9);
    check(s, |g, s| {
        let a = g.param(s, 0);
        let b = g.param(s, 1);
        let l1 = g.squared_error(a, b, &[1.0, 2.0, 0.5, 1.0, 1.0, 0.0])?;
        let u = g.sub(a, b)?;
        let l2 = g.expectile_loss(u, 0.8, &[1.0; 6])?;
        let l = g.add(l1, l2)?;
        Ok(l)
    });
}

#[test]
fn clipped_surrogate() {
    // ratios chosen away from the clip boundary where the objective has a kink
    let mut s = ParamStore::new();
    s.add("lp", &[4], vec![-1.0, -2.0, -0.5, -3.0]);
    let old = [-1.05, -1.5, -1.0, -2.95];
    check(s, |g, s| {
        let lp = g.param(s, 0);
        g.clipped_surrogate(lp, &old, &[1.0, -1.0, 2.0, 0.5], Some(0.2), &[1.0; 4])
    });
}

#[test]
fn f32_gradients_roughly_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::<f32>::new();
    s.normal("x", &[3, 4], 0.5, &mut rng);
    let r = finite_difference_check(&mut s, 1e-2, 64, |g, s| {
        let x = g.param(s, 0);
        g.cross_entropy(x, &[1, 2, 3], &[1.0; 3])
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}
