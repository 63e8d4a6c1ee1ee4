//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::{Tensor, TensorError};

/// Builds a scalar loss from leaf variables registered for `inputs`.
pub type LossBuilder<E> = dyn Fn(&mut Graph<E>, &[Var]) -> Result<Var, TensorError>;

/// Compares analytic gradients against central finite differences.
///
/// Returns the worst relative error over all input elements, where the
/// relative error of analytic `a` vs numeric `n` is `|a - n| / max(|a|, |n|, 1)`.
pub fn grad_check<E: Scalar>(
    inputs: &[Tensor<E>],
    build: &LossBuilder<E>,
    h: f64,
) -> Result<f64, TensorError> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let eval = |perturbed: &[Tensor<E>]| -> Result<f64, TensorError> {
        let mut g = Graph::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l).item().to_f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = inputs[ti].len();
        for idx in 0..n {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + E::from_f64(h);
            let up = eval(&work)?;
            work[ti].data_mut()[idx] = orig - E::from_f64(h);
            let down = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(*var).map(|g| g.data()[idx].to_f64()).unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let err = (analytic - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Worst finite-difference error for one named primitive.
#[derive(Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub worst_err: f64,
}

/// Runs every autodiff primitive through [`grad_check`] on small random
/// shapes drawn from `seed`. The loss projects each output through a random
/// constant so upstream gradients are non-uniform.
pub fn check_primitives<E: Scalar>(seed: u64, h: f64) -> Result<Vec<PrimitiveCheck>, TensorError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |r: usize, c: usize, lo: f64, hi: f64| -> Tensor<E> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| E::from_f64(rng.gen_range(lo..hi))).collect())
    };

    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<E>>,
                   build: Box<LossClosure<E>>|
     -> Result<(), TensorError> {
        let worst = grad_check(&inputs, &*build, h)?;
        out.push(PrimitiveCheck { name, worst_err: worst });
        Ok(())
    };

    // Projection constants are cloned into each closure so the builder can be
    // re-invoked for every finite-difference evaluation.
    let p34 = rand_t(3, 4, -1.0, 1.0);
    run("matmul", vec![rand_t(3, 5, -1.0, 1.0), rand_t(5, 4, -1.0, 1.0)], {
        let p = p34.clone();
        Box::new(move |g, vs| {
            let m = g.matmul(vs[0], vs[1])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(m, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("matmul_ta", vec![rand_t(5, 3, -1.0, 1.0), rand_t(5, 4, -1.0, 1.0)], {
        let p = p34.clone();
        Box::new(move |g, vs| {
            let m = g.matmul_t(vs[0], true, vs[1], false)?;
            let pc = g.constant(p.clone());
            let prod = g.mul(m, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("matmul_tb", vec![rand_t(3, 5, -1.0, 1.0), rand_t(4, 5, -1.0, 1.0)], {
        let p = p34.clone();
        Box::new(move |g, vs| {
            let m = g.matmul_t(vs[0], false, vs[1], true)?;
            let pc = g.constant(p.clone());
            let prod = g.mul(m, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("matmul_ta_tb", vec![rand_t(5, 3, -1.0, 1.0), rand_t(4, 5, -1.0, 1.0)], {
        let p = p34.clone();
        Box::new(move |g, vs| {
            let m = g.matmul_t(vs[0], true, vs[1], true)?;
            let pc = g.constant(p.clone());
            let prod = g.mul(m, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    let p25 = rand_t(2, 5, -1.0, 1.0);
    run("add", vec![rand_t(2, 5, -1.0, 1.0), rand_t(2, 5, -1.0, 1.0)], {
        let p = p25.clone();
        Box::new(move |g, vs| {
            let s = g.add(vs[0], vs[1])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("mul", vec![rand_t(2, 5, -1.0, 1.0), rand_t(2, 5, -1.0, 1.0)], {
        let p = p25.clone();
        Box::new(move |g, vs| {
            let s = g.mul(vs[0], vs[1])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("scale", vec![rand_t(2, 5, -1.0, 1.0)], {
        let p = p25.clone();
        Box::new(move |g, vs| {
            let s = g.scale(vs[0], E::from_f64(-1.7))?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("add_row_broadcast", vec![rand_t(4, 5, -1.0, 1.0), rand_t(1, 5, -1.0, 1.0)], {
        let p = rand_t(4, 5, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.add_row_broadcast(vs[0], vs[1])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("transpose", vec![rand_t(3, 4, -1.0, 1.0)], {
        let p = rand_t(4, 3, -1.0, 1.0);
        Box::new(move |g, vs| {
            let t = g.transpose(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(t, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("softmax", vec![rand_t(3, 6, -2.0, 2.0)], {
        let p = rand_t(3, 6, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.softmax(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("log_softmax", vec![rand_t(3, 6, -2.0, 2.0)], {
        let p = rand_t(3, 6, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.log_softmax(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run(
        "layer_norm",
        vec![rand_t(3, 6, -1.0, 1.0), rand_t(1, 6, 0.5, 1.5), rand_t(1, 6, -0.5, 0.5)],
        {
            let p = rand_t(3, 6, -1.0, 1.0);
            Box::new(move |g, vs| {
                let s = g.layer_norm(vs[0], vs[1], vs[2], 1e-8)?;
                let pc = g.constant(p.clone());
                let prod = g.mul(s, pc)?;
                g.reduce_sum(prod)
            })
        },
    )?;

    run("gelu", vec![rand_t(3, 5, -2.0, 2.0)], {
        let p = rand_t(3, 5, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.gelu(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    // Repeated indices exercise the scatter-add path.
    run("gather_rows", vec![rand_t(5, 4, -1.0, 1.0)], {
        let p = rand_t(4, 4, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.gather_rows(vs[0], &[2, 0, 2, 4])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("concat_rows", vec![rand_t(2, 4, -1.0, 1.0), rand_t(3, 4, -1.0, 1.0)], {
        let p = rand_t(5, 4, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.concat_rows(&[vs[0], vs[1]])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("concat_cols", vec![rand_t(3, 2, -1.0, 1.0), rand_t(3, 4, -1.0, 1.0)], {
        let p = rand_t(3, 6, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.concat_cols(&[vs[0], vs[1]])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("slice_rows", vec![rand_t(5, 4, -1.0, 1.0)], {
        let p = rand_t(2, 4, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.slice_rows(vs[0], 1, 2)?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("slice_cols", vec![rand_t(4, 6, -1.0, 1.0)], {
        let p = rand_t(4, 3, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.slice_cols(vs[0], 2, 3)?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("masked_fill", vec![rand_t(3, 5, -1.0, 1.0)], {
        let p = rand_t(3, 5, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.masked_fill_cols(vs[0], &[false, true, false, false, true], E::from_f64(-3.0))?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("reduce_mean", vec![rand_t(3, 5, -1.0, 1.0)], Box::new(move |g, vs| g.reduce_mean(vs[0])))?;
    run("reduce_sum", vec![rand_t(3, 5, -1.0, 1.0)], Box::new(move |g, vs| g.reduce_sum(vs[0])))?;

    run("log", vec![rand_t(3, 5, 0.2, 1.4)], {
        let p = rand_t(3, 5, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.log(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("exp", vec![rand_t(3, 5, -1.0, 1.0)], {
        let p = rand_t(3, 5, -1.0, 1.0);
        Box::new(move |g, vs| {
            let s = g.exp(vs[0])?;
            let pc = g.constant(p.clone());
            let prod = g.mul(s, pc)?;
            g.reduce_sum(prod)
        })
    })?;

    run("softmax_cross_entropy", vec![rand_t(4, 6, -2.0, 2.0)], {
        Box::new(move |g, vs| g.softmax_cross_entropy(vs[0], &[1, 0, 5, 3]))
    })?;

    // batch 2 x seq 3, hidden 4, 2 heads, one masked key position
    run(
        "multi_head_attention",
        vec![rand_t(6, 4, -1.0, 1.0), rand_t(6, 4, -1.0, 1.0), rand_t(6, 4, -1.0, 1.0)],
        {
            let p = rand_t(6, 4, -1.0, 1.0);
            Box::new(move |g, vs| {
                let masks = vec![vec![false, false, true], vec![false, false, false]];
                let a = g.multi_head_attention(vs[0], vs[1], vs[2], 2, 3, &masks)?;
                let pc = g.constant(p.clone());
                let prod = g.mul(a, pc)?;
                g.reduce_sum(prod)
            })
        },
    )?;

    Ok(out)
}

type LossClosure<E> = dyn Fn(&mut Graph<E>, &[Var]) -> Result<Var, TensorError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitives_pass_finite_difference_checks() {
        for seed in 0..3u64 {
            for check in check_primitives::<f64>(seed, 1e-5).unwrap() {
                assert!(
                    check.worst_err < 1e-4,
                    "{} failed at seed {seed}: err {}",
                    check.name,
                    check.worst_err
                );
            }
        }
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // loss = sum(exp(x)) but probe against d/dx sum(x): errors must be large.
        let x = Tensor::<f64>::from_vec(1, 3, vec![0.3, -0.2, 0.9]);
        let err = grad_check(&[x], &|g, vs| {
            let e = g.exp(vs[0])?;
            g.reduce_sum(e)
        }, 1e-5)
        .unwrap();
        assert!(err < 1e-8, "exp gradient should check out, err = {err}");
    }
}
