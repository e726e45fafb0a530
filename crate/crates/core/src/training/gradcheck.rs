//! Finite-difference audits of the tape gradients.
//!
//! Each fragment is a self-contained graph over randomly sampled
//! leaves. Analytic gradients from one backward pass are compared
//! against central differences coordinate by coordinate. Samples whose
//! forward pass lands near a non-smooth boundary (clamp edges, relu
//! kinks, vanishing norms) are resampled under a retry budget so the
//! comparison only runs where the derivative is honest.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pipeline::{Mode, ModelParams, PipelineConfig};
use crate::training::model::{
    d_alignments, d_attend, d_guidance_init, d_guidance_step, d_head_cosine, d_head_sigmoid,
    d_regulate, d_score, ModelVars, RarVars, RcrVars,
};

/// A differentiable piece of the pipeline under audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragment {
    /// One attention pass, all inputs and factors checked.
    Attend,
    /// Alignment build, factor update, and re-attention as one graph.
    Refinement,
    /// Guidance pooling over two re-weighting steps.
    Guidance,
    /// The bilinear readout alone; held to a much tighter tolerance.
    LinearHead,
    /// The whole scoring graph for a mode.
    Full { mode: Mode, steps: usize },
}

impl Fragment {
    pub fn name(&self) -> String {
        match self {
            Fragment::Attend => "attend".to_string(),
            Fragment::Refinement => "refinement".to_string(),
            Fragment::Guidance => "guidance".to_string(),
            Fragment::LinearHead => "linear-head".to_string(),
            Fragment::Full { mode, steps } => format!("full-{mode}-{steps}"),
        }
    }

    /// The default audit set: the three composite fragments plus the
    /// full two-step cooperative graph.
    pub fn standard_set() -> Vec<Fragment> {
        vec![
            Fragment::Attend,
            Fragment::Refinement,
            Fragment::Guidance,
            Fragment::Full {
                mode: Mode::Rcar,
                steps: 2,
            },
        ]
    }
}

/// Deliberate corruption of one analytic gradient coordinate, used to
/// prove the audit actually detects wrong gradients.
#[derive(Debug, Clone)]
pub struct CorruptSpec {
    pub tensor: String,
    pub coordinate: usize,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub e_hidden: usize,
    pub lambda_hidden: usize,
    pub probes: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    pub retry_budget: usize,
    pub corrupt: Option<CorruptSpec>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            d: 6,
            m: 4,
            k: 3,
            l: 3,
            e_hidden: 8,
            lambda_hidden: 5,
            probes: 50,
            tolerance: 1e-4,
            // The temperature softmax has third derivatives of order
            // lambda^3; this step keeps central-difference truncation
            // two orders below the tolerance.
            step: 1e-4,
            seed: 0x5eed,
            retry_budget: 25,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub fragment: String,
    pub probes_run: usize,
    pub resamples: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_coordinate: usize,
    pub pass: bool,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let mut line = format!(
            "{verdict} {} probes={} resamples={} max_rel_err={:.3e} worst={}[{}]",
            self.fragment,
            self.probes_run,
            self.resamples,
            self.max_rel_err,
            self.worst_tensor,
            self.worst_coordinate
        );
        for f in &self.failures {
            line.push('\n');
            line.push_str("  ");
            line.push_str(f);
        }
        line
    }
}

/// One sampled problem instance: the tensors under check (nudged by the
/// finite-difference loop) and fixed constants (projection weights).
struct Instance {
    checked: Vec<(String, Tensor)>,
    constants: Vec<Tensor>,
}

fn params_to_checked(params: &ModelParams) -> Vec<(String, Tensor)> {
    vec![
        ("rcr.w_a".into(), Tensor::Matrix(params.rcr.w_a.clone())),
        ("rcr.e.w1".into(), Tensor::Matrix(params.rcr.e_mlp.w1.clone())),
        ("rcr.e.b1".into(), Tensor::Vector(params.rcr.e_mlp.b1.clone())),
        ("rcr.e.w2".into(), Tensor::Matrix(params.rcr.e_mlp.w2.clone())),
        ("rcr.e.b2".into(), Tensor::Vector(params.rcr.e_mlp.b2.clone())),
        ("rcr.lam.w1".into(), Tensor::Matrix(params.rcr.lambda_mlp.w1.clone())),
        ("rcr.lam.b1".into(), Tensor::Vector(params.rcr.lambda_mlp.b1.clone())),
        ("rcr.lam.w2".into(), Tensor::Vector(params.rcr.lambda_mlp.w2.column(0).to_owned())),
        ("rcr.lam.b2".into(), Tensor::Scalar(params.rcr.lambda_mlp.b2[0])),
        ("rar.w_g".into(), Tensor::Matrix(params.rar.w_g.clone())),
        ("rar.w_l".into(), Tensor::Matrix(params.rar.w_l.clone())),
        ("rar.w_beta".into(), Tensor::Vector(params.rar.w_beta.clone())),
        ("rar.w_s".into(), Tensor::Vector(params.rar.w_s.clone())),
    ]
}

fn model_vars_from(vars: &[Var]) -> ModelVars {
    ModelVars {
        rcr: RcrVars {
            w_a: vars[0],
            e_w1: vars[1],
            e_b1: vars[2],
            e_w2: vars[3],
            e_b2: vars[4],
            lam_w1: vars[5],
            lam_b1: vars[6],
            lam_w2: vars[7],
            lam_b2: vars[8],
        },
        rar: RarVars {
            w_g: vars[9],
            w_l: vars[10],
            w_beta: vars[11],
            w_s: vars[12],
            w_a: vars[0],
        },
    }
}

fn rand_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn rand_vector(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(lo..hi))
}

fn sample_instance(fragment: Fragment, spec: &ProbeSpec, rng: &mut ChaCha12Rng) -> Instance {
    let (d, m, k, l) = (spec.d, spec.m, spec.k, spec.l);
    match fragment {
        Fragment::Attend => Instance {
            checked: vec![
                ("queries".into(), Tensor::Matrix(rand_matrix(rng, l, d, -1.0, 1.0))),
                ("keys".into(), Tensor::Matrix(rand_matrix(rng, k, d, -1.0, 1.0))),
                ("e".into(), Tensor::Matrix(rand_matrix(rng, l, d, -0.8, 0.8))),
                ("lambda".into(), Tensor::Vector(rand_vector(rng, l, 5.0, 15.0))),
            ],
            constants: vec![Tensor::Matrix(rand_matrix(rng, l, d, -1.0, 1.0))],
        },
        Fragment::Refinement => {
            let params = ModelParams::init_with_hidden(
                d,
                m,
                spec.e_hidden,
                spec.lambda_hidden,
                rng,
            );
            let mut checked = vec![
                ("queries".into(), Tensor::Matrix(rand_matrix(rng, l, d, -1.0, 1.0))),
                ("keys".into(), Tensor::Matrix(rand_matrix(rng, k, d, -1.0, 1.0))),
                ("e".into(), Tensor::Matrix(rand_matrix(rng, l, d, -0.8, 0.8))),
                ("lambda".into(), Tensor::Vector(rand_vector(rng, l, 5.0, 15.0))),
            ];
            checked.extend(params_to_checked(&params).into_iter().take(9));
            Instance {
                checked,
                constants: vec![],
            }
        }
        Fragment::Guidance => {
            let mut a = rand_matrix(rng, l, m, -1.0, 1.0);
            for mut row in a.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
            Instance {
                checked: vec![
                    ("alignments".into(), Tensor::Matrix(a)),
                    ("rar.w_g".into(), Tensor::Matrix(rand_matrix(rng, m, m, -0.7, 0.7))),
                    ("rar.w_l".into(), Tensor::Matrix(rand_matrix(rng, m, m, -0.7, 0.7))),
                    ("rar.w_beta".into(), Tensor::Vector(rand_vector(rng, m, -1.0, 1.0))),
                    ("rar.w_s".into(), Tensor::Vector(rand_vector(rng, m, -1.0, 1.0))),
                ],
                constants: vec![],
            }
        }
        Fragment::LinearHead => Instance {
            checked: vec![
                ("rar.w_s".into(), Tensor::Vector(rand_vector(rng, m, -1.0, 1.0))),
                ("pooled".into(), Tensor::Vector(rand_vector(rng, m, -1.0, 1.0))),
            ],
            constants: vec![],
        },
        Fragment::Full { mode, .. } => {
            let params =
                ModelParams::init_with_hidden(d, m, spec.e_hidden, spec.lambda_hidden, rng);
            let mut checked = vec![
                ("regions".into(), Tensor::Matrix(rand_matrix(rng, k, d, -1.0, 1.0))),
                ("words".into(), Tensor::Matrix(rand_matrix(rng, l, d, -1.0, 1.0))),
                ("e0".into(), Tensor::Matrix(rand_matrix(rng, l, d, -0.8, 0.8))),
                ("lambda0".into(), Tensor::Vector(rand_vector(rng, l, 5.0, 15.0))),
            ];
            if mode != Mode::Baseline {
                checked.extend(params_to_checked(&params));
            }
            Instance {
                checked,
                constants: vec![],
            }
        }
    }
}

fn full_config(mode: Mode, steps: usize, d: usize, m: usize) -> PipelineConfig {
    match mode {
        Mode::Baseline => PipelineConfig::baseline(d),
        Mode::Rcr => PipelineConfig::rcr(d, m, steps),
        Mode::Rar => PipelineConfig::rar(d, m, steps),
        Mode::Rcar => PipelineConfig::rcar(d, m, steps),
    }
}

/// Rebuild the fragment graph from the instance tensors; returns the
/// scalar loss node. Leaves are created in `checked` order so their
/// positions match gradient extraction and nudging.
fn build_loss(
    fragment: Fragment,
    spec: &ProbeSpec,
    tape: &mut Tape,
    instance: &Instance,
) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = instance
        .checked
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect();
    let loss = match fragment {
        Fragment::Attend => {
            let attended = d_attend(tape, vars[0], vars[1], vars[2], vars[3]);
            let proj = tape.leaf(instance.constants[0].clone());
            let weighted = tape.mul(attended, proj);
            tape.sum(weighted)
        }
        Fragment::Refinement => {
            let rcr = RcrVars {
                w_a: vars[4],
                e_w1: vars[5],
                e_b1: vars[6],
                e_w2: vars[7],
                e_b2: vars[8],
                lam_w1: vars[9],
                lam_b1: vars[10],
                lam_w2: vars[11],
                lam_b2: vars[12],
            };
            let attended = d_attend(tape, vars[0], vars[1], vars[2], vars[3]);
            let a = d_alignments(tape, vars[0], attended, rcr.w_a);
            let (e1, l1) = d_regulate(tape, &rcr, a, vars[2], vars[3], true);
            let attended1 = d_attend(tape, vars[0], vars[1], e1, l1);
            d_head_cosine(tape, vars[0], attended1)
        }
        Fragment::Guidance => {
            let rar = RarVars {
                w_g: vars[1],
                w_l: vars[2],
                w_beta: vars[3],
                w_s: vars[4],
                w_a: vars[1],
            };
            let (a_g0, _) = d_guidance_init(tape, vars[0]);
            let (a_g1, _) = d_guidance_step(tape, &rar, a_g0, vars[0], false);
            let (a_g2, _) = d_guidance_step(tape, &rar, a_g1, vars[0], true);
            d_head_sigmoid(tape, rar.w_s, a_g2)
        }
        Fragment::LinearHead => tape.dot(vars[0], vars[1]),
        Fragment::Full { mode, steps } => {
            let config = full_config(mode, steps, spec.d, spec.m);
            let model = (mode != Mode::Baseline).then(|| model_vars_from(&vars[4..]));
            d_score(
                tape,
                model.as_ref(),
                vars[0],
                vars[1],
                vars[2],
                vars[3],
                &config,
            )
        }
    };
    (vars, loss)
}

/// Run the audit for one fragment.
pub fn check_fragment(fragment: Fragment, spec: &ProbeSpec) -> Result<GradCheckReport> {
    let tolerance = match fragment {
        Fragment::LinearHead => spec.tolerance.min(1e-8),
        _ => spec.tolerance,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut report = GradCheckReport {
        fragment: fragment.name(),
        probes_run: 0,
        resamples: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_coordinate: 0,
        pass: true,
        failures: Vec::new(),
    };
    let margin = 5.0 * spec.step;

    for _ in 0..spec.probes {
        let mut tries = 0;
        let instance = loop {
            let candidate = sample_instance(fragment, spec, &mut rng);
            let mut tape = Tape::with_hazard_margin(margin);
            let _ = build_loss(fragment, spec, &mut tape, &candidate);
            match tape.hazard() {
                None => break candidate,
                Some(h) => {
                    report.resamples += 1;
                    tries += 1;
                    if tries > spec.retry_budget {
                        report.pass = false;
                        report.failures.push(format!(
                            "retry budget exhausted while avoiding boundary: {h}"
                        ));
                        return Ok(report);
                    }
                }
            }
        };

        let mut tape = Tape::new();
        let (vars, loss) = build_loss(fragment, spec, &mut tape, &instance);
        let grads = tape.backward(loss);
        let mut analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| grads.get(&tape, *v).flat())
            .collect();
        if let Some(c) = &spec.corrupt {
            for (slot, (name, _)) in analytic.iter_mut().zip(&instance.checked) {
                if name == &c.tensor && c.coordinate < slot.len() {
                    slot[c.coordinate] *= c.factor;
                }
            }
        }

        for (ti, (name, tensor)) in instance.checked.iter().enumerate() {
            for coord in 0..tensor.len() {
                let eval = |delta: f64| -> f64 {
                    let mut nudged = Instance {
                        checked: instance.checked.clone(),
                        constants: instance.constants.clone(),
                    };
                    nudged.checked[ti].1.nudge(coord, delta);
                    let mut t = Tape::new();
                    let (_, l) = build_loss(fragment, spec, &mut t, &nudged);
                    t.value(l).scalar()
                };
                let numeric = (eval(spec.step) - eval(-spec.step)) / (2.0 * spec.step);
                let a = analytic[ti][coord];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_tensor = name.clone();
                    report.worst_coordinate = coord;
                }
                if rel > tolerance && report.failures.len() < 8 {
                    report.failures.push(format!(
                        "{name}[{coord}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                    ));
                }
            }
        }
        report.probes_run += 1;
    }

    report.pass = report.pass && report.max_rel_err <= tolerance;
    Ok(report)
}

/// Run the standard audit set; error carries the rendered reports when
/// any fragment fails.
pub fn check_standard(spec: &ProbeSpec) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for fragment in Fragment::standard_set() {
        reports.push(check_fragment(fragment, spec)?);
    }
    if reports.iter().any(|r| !r.pass) {
        let rendered: Vec<String> = reports.iter().map(|r| r.render()).collect();
        return Err(Error::GradCheck(rendered.join("\n")));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec(probes: usize, seed: u64) -> ProbeSpec {
        ProbeSpec {
            probes,
            seed,
            ..ProbeSpec::default()
        }
    }

    #[test]
    fn attend_fragment_passes() {
        let report = check_fragment(Fragment::Attend, &quick_spec(6, 11)).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn refinement_fragment_passes() {
        let report = check_fragment(Fragment::Refinement, &quick_spec(5, 12)).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn guidance_fragment_passes() {
        let report = check_fragment(Fragment::Guidance, &quick_spec(6, 13)).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn linear_head_meets_tight_tolerance() {
        let report = check_fragment(Fragment::LinearHead, &quick_spec(20, 14)).unwrap();
        assert!(report.pass, "{}", report.render());
        assert!(report.max_rel_err <= 1e-8, "{}", report.render());
    }

    #[test]
    fn every_mode_passes_end_to_end() {
        for (mode, steps) in [
            (Mode::Baseline, 0),
            (Mode::Rcr, 1),
            (Mode::Rar, 1),
            (Mode::Rcar, 2),
        ] {
            let report =
                check_fragment(Fragment::Full { mode, steps }, &quick_spec(3, 15)).unwrap();
            assert!(report.pass, "{}", report.render());
        }
    }

    #[test]
    fn corrupted_gradient_is_detected_and_named() {
        let mut spec = quick_spec(3, 16);
        spec.corrupt = Some(CorruptSpec {
            tensor: "rar.w_s".to_string(),
            coordinate: 0,
            factor: 1.1,
        });
        let report = check_fragment(Fragment::Guidance, &spec).unwrap();
        assert!(!report.pass, "corruption went unnoticed: {}", report.render());
        assert_eq!(report.worst_tensor, "rar.w_s");
        assert!(report
            .failures
            .iter()
            .any(|f| f.contains("rar.w_s[0]")));
    }

    #[test]
    fn standard_set_reports_four_fragments() {
        let reports = check_standard(&quick_spec(2, 17)).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.pass, "{}", r.render());
        }
    }
}
