//! Central finite-difference gradient checking.
//!
//! A check builds a scalar from parameters and input tensors, backpropagates
//! once, then compares selected gradient coordinates against
//! `(f(x + eps) - f(x - eps)) / (2 eps)`. The relative error of one
//! coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{seeded_rng, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates probed per tensor; tensors at or under this size are
    /// checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Scale one analytic coordinate by this factor before comparing. Used
    /// to prove that the harness catches a wrong gradient.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: 24,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords_checked > 0 && self.max_rel_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<32} max_rel_err={:.3e} coords={} worst={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.coords_checked,
            self.worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check gradients of `build` with respect to every parameter it touches and
/// every entry of `inputs`.
pub fn check_gradients<F>(
    name: &str,
    params: &ParamStore,
    inputs: &[Tensor],
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let v = g.value(out);
        assert_eq!(v.len(), 1, "gradient check target must be a scalar");
        v.data()[0]
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::with_params(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let pg = grads.params(&g);
        let ig: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        (pg, ig)
    };

    let mut rng = seeded_rng(cfg.seed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: String::from("-"),
        tolerance: cfg.tolerance,
    };
    let mut corrupt_pending = cfg.corrupt;

    let mut record = |label: String, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        let analytic = match corrupt_pending.take() {
            Some(f) => analytic * f + (f - 1.0) * 1e-3,
            None => analytic,
        };
        let err = relative_error(analytic, numeric, cfg.floor);
        report.coords_checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{label} (analytic {analytic:.6e}, numeric {numeric:.6e})");
        }
    };

    let mut store = params.clone();
    for (id, analytic) in &param_grads {
        let n = analytic.len();
        for i in pick_coords(n, cfg.max_coords, &mut rng) {
            let orig = store.get(*id).data()[i];
            store.get_mut(*id).data_mut()[i] = orig + cfg.eps;
            let fp = eval(&store, inputs);
            store.get_mut(*id).data_mut()[i] = orig - cfg.eps;
            let fm = eval(&store, inputs);
            store.get_mut(*id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let label = format!("{}[{i}]", params.entry(*id).name);
            record(label, analytic.data()[i], numeric, &mut report);
        }
    }

    let mut probe = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let n = analytic.len();
        for i in pick_coords(n, cfg.max_coords, &mut rng) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + cfg.eps;
            let fp = eval(params, &probe);
            probe[k].data_mut()[i] = orig - cfg.eps;
            let fm = eval(params, &probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            record(format!("input{k}[{i}]"), analytic.data()[i], numeric, &mut report);
        }
    }
    report
}

fn pick_coords<R: Rng>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Random fixed projection `sum(out * r)` that turns a tensor into a scalar
/// with generic (non-symmetric) gradients.
pub fn random_projection(g: &mut Graph<'_>, out: Var, seed: u64) -> Var {
    let mut rng = seeded_rng(seed);
    let r = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(out, r);
    g.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder, ParamGroup};
    use crate::nn::{Conv2d, ConvSpec};

    fn cfg() -> GradCheckConfig {
        GradCheckConfig::default()
    }

    fn unary_case(name: &str, f: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let mut rng = seeded_rng(11);
        let x = Tensor::uniform([2, 3, 4, 5], -1.5, 1.5, &mut rng);
        let store = ParamStore::new();
        let report = check_gradients(
            name,
            &store,
            &[x],
            |g, v| {
                let y = f(g, v[0]);
                random_projection(g, y, 5)
            },
            &cfg(),
        );
        assert!(report.passed(), "{}", report.line());
    }

    #[test]
    fn elementwise_ops() {
        unary_case("sigmoid", |g, x| g.sigmoid(x));
        unary_case("tanh", |g, x| g.tanh(x));
        unary_case("elu", |g, x| g.elu(x));
        unary_case("exp", |g, x| g.exp(x));
        unary_case("square", |g, x| g.square(x));
        unary_case("abs", |g, x| g.abs(x));
        unary_case("scale", |g, x| g.scale(x, -2.5));
        unary_case("add_scalar", |g, x| g.add_scalar(x, 0.3));
    }

    #[test]
    fn structural_ops() {
        unary_case("mean_hw", |g, x| g.mean_hw(x));
        unary_case("avg_pool2", |g, x| g.avg_pool2(x));
        unary_case("pad_replicate", |g, x| g.pad_replicate(x, 2));
        unary_case("upsample", |g, x| g.upsample_bilinear(x, 7, 13));
        unary_case("downsample", |g, x| g.upsample_bilinear(x, 3, 2));
        unary_case("slice", |g, x| g.slice_channels(x, 1, 2));
        unary_case("concat", |g, x| {
            let s = g.square(x);
            g.concat(&[x, s, x])
        });
        unary_case("mean", |g, x| {
            let s = g.square(x);
            g.mean(s)
        });
    }

    #[test]
    fn broadcast_binary_ops() {
        let mut rng = seeded_rng(2);
        let a = Tensor::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let m = Tensor::uniform([2, 1, 4, 4], -1.0, 1.0, &mut rng);
        let s = Tensor::uniform([2, 3, 1, 1], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform([1, 1, 1, 1], 0.5, 1.0, &mut rng);
        let report = check_gradients(
            "broadcast",
            &ParamStore::new(),
            &[a, m, s, k],
            |g, v| {
                let x = g.mul(v[0], v[1]);
                let y = g.add(x, v[2]);
                let z = g.sub(y, v[3]);
                let q = g.mul(z, v[3]);
                random_projection(g, q, 1)
            },
            &cfg(),
        );
        assert!(report.passed(), "{}", report.line());
    }

    #[test]
    fn convolution_layers() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(4);
            let conv = {
                let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Fusion);
                let spec = ConvSpec {
                    kernel: k,
                    stride,
                    padding: pad,
                    bias: true,
                    weight_init: Init::Normal(0.5),
                    bias_init: Init::Normal(0.5),
                };
                Conv2d::new(&mut pb.pp("conv"), 3, 4, spec)
            };
            let x = Tensor::uniform([2, 3, 6, 5], -1.0, 1.0, &mut rng);
            let report = check_gradients(
                "conv2d",
                &store,
                &[x],
                |g, v| {
                    let y = conv.forward(g, v[0]);
                    random_projection(g, y, 9)
                },
                &cfg(),
            );
            assert!(report.passed(), "stride {stride}: {}", report.line());
        }
    }

    #[test]
    fn propagation_step() {
        let mut rng = seeded_rng(8);
        let d = Tensor::uniform([2, 1, 6, 7], 0.0, 1.0, &mut rng);
        let w = Tensor::uniform([2, 4, 6, 7], -0.2, 0.25, &mut rng);
        let off = Tensor::uniform([2, 8, 6, 7], -2.7, 2.7, &mut rng);
        let report = check_gradients(
            "propagate_step",
            &ParamStore::new(),
            &[d, w, off],
            |g, v| {
                let a = g.propagate_step(v[0], v[1], v[2]);
                let b = g.propagate_step(a, v[1], v[2]);
                random_projection(g, b, 3)
            },
            &GradCheckConfig {
                max_coords: 64,
                ..cfg()
            },
        );
        assert!(report.passed(), "{}", report.line());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = seeded_rng(1);
        let x = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let report = check_gradients(
            "corrupt",
            &ParamStore::new(),
            &[x],
            |g, v| {
                let t = g.tanh(v[0]);
                g.sum(t)
            },
            &GradCheckConfig {
                corrupt: Some(1.01),
                ..cfg()
            },
        );
        assert!(!report.passed());
    }
}
