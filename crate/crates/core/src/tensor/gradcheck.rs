//! Central finite-difference gradient checking in `f64`.
//!
//! The checker only ever runs forward passes, so it stays independent of the
//! backward rules it validates.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{self, AttentionConfig};
use super::{Graph, ParamStore, Result, Segment, Tensor, Var};
use crate::rng;

/// Outcome for one checked function.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
///
/// `build` receives one leaf per input tensor and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            nu2 += numeric.powi(2);
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom })
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| n.sample(rng))
}

/// Normal draws pushed at least `gap` away from zero (keeps kinks out of
/// the difference stencil).
fn randn_away(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = n.sample(rng);
        if v.abs() < gap {
            gap.copysign(v) + v
        } else {
            v
        }
    })
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "gradcheck-projection", 0);
    let shape = g.shape(out).to_vec();
    let w = g.leaf(randn(&shape, &mut r));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Box<dyn Fn(u64) -> Result<f64>>);

fn cases() -> Vec<Case> {
    const H: f64 = 1e-5;
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, |$rng:ident, $seed:ident| $body:block) => {
            v.push((
                $name,
                Box::new(move |$seed: u64| {
                    let mut $rng = rng::stream($seed, $name, 0);
                    $body
                }),
            ));
        };
    }
    case!("matmul", |r, s| {
        let (n, k, m) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let ins = [randn(&[n, k], &mut r), randn(&[k, m], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, s)
        })
    });
    case!("linear", |r, s| {
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let ins = [randn(&[n, i], &mut r), randn(&[i, o], &mut r), randn(&[o], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let y = g.linear(x[0], x[1], Some(x[2]))?;
            project(g, y, s)
        })
    });
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        v.push((
            name,
            Box::new(move |s| {
                let mut r = rng::stream(s, name, 0);
                let shape = [r.gen_range(1..4), r.gen_range(1..4)];
                let ins = [randn(&shape, &mut r), randn(&shape, &mut r)];
                check_gradients(&ins, H, |g, x| {
                    let y = match which {
                        0 => g.add(x[0], x[1])?,
                        1 => g.sub(x[0], x[1])?,
                        _ => g.mul(x[0], x[1])?,
                    };
                    project(g, y, s)
                })
            }),
        ));
    }
    case!("add_row", |r, s| {
        let (n, d) = (r.gen_range(1..5), r.gen_range(1..5));
        let ins = [randn(&[n, d], &mut r), randn(&[d], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let y = g.add_row(x[0], x[1])?;
            project(g, y, s)
        })
    });
    case!("scale", |r, s| {
        let c: f64 = r.gen_range(-2.0..2.0);
        let ins = [randn(&[3, 2], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let y = g.scale(x[0], c);
            project(g, y, s)
        })
    });
    case!("layer_norm", |r, s| {
        let (n, d) = (r.gen_range(1..4), r.gen_range(2..6));
        let ins = [randn(&[n, d], &mut r), randn(&[d], &mut r), randn(&[d], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let y = g.layer_norm(x[0], Some((x[1], x[2])))?;
            project(g, y, s)
        })
    });
    for name in ["gelu", "tanh", "relu", "abs", "square", "sqrt"] {
        v.push((
            name,
            Box::new(move |s| {
                let mut r = rng::stream(s, name, 0);
                let mut t = randn_away(&[3, 3], 0.05, &mut r);
                if name == "sqrt" {
                    t.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.1);
                }
                check_gradients(&[t], H, |g, x| {
                    let y = match name {
                        "gelu" => g.gelu(x[0]),
                        "tanh" => g.tanh(x[0]),
                        "relu" => g.relu(x[0]),
                        "abs" => g.abs(x[0]),
                        "square" => g.square(x[0]),
                        _ => g.sqrt(x[0]),
                    };
                    project(g, y, s)
                })
            }),
        ));
    }
    case!("sum_mean", |r, _s| {
        let ins = [randn(&[4, 3], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let a = g.sum(x[0]);
            let sq = g.square(x[0]);
            let b = g.mean(sq);
            g.add(a, b)
        })
    });
    case!("frobenius_norm", |r, _s| {
        let ins = [randn(&[3, 4], &mut r)];
        check_gradients(&ins, H, |g, x| Ok(g.frobenius_norm(x[0])))
    });
    case!("reshape_concat_slice", |r, s| {
        let d = r.gen_range(1..4);
        let ins = [randn(&[2, d], &mut r), randn(&[3, d], &mut r), randn(&[5, 2], &mut r)];
        check_gradients(&ins, H, |g, x| {
            let c = g.concat_rows(&[x[0], x[1]])?;
            let sl = g.slice_rows(c, 1, 3)?;
            let c2 = g.concat_cols(&[c, x[2]])?;
            let rs = g.reshape(c2, [c2_len(g, c2)])?;
            let a = project(g, sl, s)?;
            let b = project(g, rs, s + 1)?;
            g.add(a, b)
        })
    });
    case!("attention", |r, s| {
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..4);
        let (q1, q2, k1, k2) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let ins = [
            randn(&[q1 + q2, d], &mut r),
            randn(&[k1 + k2, d], &mut r),
            randn(&[k1 + k2, d], &mut r),
        ];
        let segs = Segment::blocks(&[q1, q2], &[k1, k2]);
        check_gradients(&ins, H, move |g, x| {
            let y = g.attention(x[0], x[1], x[2], heads, &segs)?;
            project(g, y, s)
        })
    });
    case!("attention_block", |r, s| {
        let cfg = AttentionConfig::new(4, 2)?;
        let mut store = ParamStore::<f64>::new();
        nn::init_attention_block(&mut store, "b", &cfg, true, &mut r)?;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut ins: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().tensor.clone()).collect();
        ins.push(randn(&[3, 4], &mut r));
        ins.push(randn(&[5, 4], &mut r));
        check_gradients(&ins, H, move |g, x| {
            let k = names.len();
            let y = block_with_leaves(g, &names, &x[..k], x[k], x[k + 1], &cfg)?;
            project(g, y, s)
        })
    });
    case!("posemb_linear", |r, s| {
        let pts: Vec<[f64; 3]> = (0..4)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let ins = [randn(&[nn::FOURIER_DIM, 3], &mut r), randn(&[3], &mut r)];
        check_gradients(&ins, H, move |g, x| {
            let f = g.leaf(nn::fourier_features(&pts)?);
            let y = g.linear(f, x[0], Some(x[1]))?;
            project(g, y, s)
        })
    });
    case!("two_layer_net", |r, _s| {
        let ins = [
            randn(&[6, 3], &mut r),
            randn(&[3, 8], &mut r),
            randn(&[8], &mut r),
            randn(&[8, 1], &mut r),
            randn(&[1], &mut r),
            randn(&[6, 1], &mut r),
        ];
        check_gradients(&ins, 1e-3, |g, x| {
            let h = g.linear(x[0], x[1], Some(x[2]))?;
            let h = g.gelu(h);
            let y = g.linear(h, x[3], Some(x[4]))?;
            let e = g.sub(y, x[5])?;
            let e = g.square(e);
            Ok(g.mean(e))
        })
    });
    v
}

fn c2_len(g: &Graph<f64>, v: Var) -> usize {
    g.value(v).len()
}

/// The attention block of [`nn::attention_block`], re-expressed with its
/// parameters as plain leaves so the checker can perturb them.
fn block_with_leaves(
    g: &mut Graph<f64>,
    names: &[String],
    leaves: &[Var],
    x: Var,
    ctx: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let p = |n: &str| leaves[names.iter().position(|m| m == n).expect("param")];
    let ln = |g: &mut Graph<f64>, pre: &str, v: Var| g.layer_norm(v, Some((p(&format!("{pre}.gamma")), p(&format!("{pre}.beta")))));
    let lin = |g: &mut Graph<f64>, pre: &str, v: Var| g.linear(v, p(&format!("{pre}.w")), Some(p(&format!("{pre}.b"))));
    let xn = ln(g, "b.ln_q", x)?;
    let cn = ln(g, "b.ln_kv", ctx)?;
    let q = lin(g, "b.attn.q", xn)?;
    let k = lin(g, "b.attn.k", cn)?;
    let v = lin(g, "b.attn.v", cn)?;
    let rows = (g.shape(xn)[0], g.shape(cn)[0]);
    let a = g.attention(q, k, v, cfg.num_heads, &[Segment::full(rows.0, rows.1)])?;
    let a = lin(g, "b.attn.o", a)?;
    let h = g.add(x, a)?;
    let hn = ln(g, "b.ln_ffn", h)?;
    let f = lin(g, "b.ffn1", hn)?;
    let f = g.gelu(f);
    let f = lin(g, "b.ffn2", f)?;
    g.add(h, f)
}

/// Run every differentiable op on `instances` random problems each.
pub fn run_op_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    cases()
        .into_iter()
        .map(|(name, f)| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                worst = worst.max(f(rng::derive_seed(seed, name, i as u64))?);
            }
            Ok(OpCheck {
                name,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_op_suite(3, 11).unwrap() {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn checker_catches_wrong_gradient() {
        // d/dx of detach(x)·x is x, while the true derivative is 2x.
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_gradients(&[x], 1e-5, |g, v| {
            let d = g.detach(v[0]);
            let y = g.mul(d, v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err > 0.1);
    }
}
