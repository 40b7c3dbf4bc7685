use dapspp_core::linalg::{dot, norm};
use dapspp_core::operators::*;
use dapspp_core::rng::{normal_vec, stream, Purpose};
use dapspp_core::Mat;
use rand::Rng;

fn linear_operators() -> Vec<Box<dyn ForwardOperator<f64>>> {
    let img = ImageShape::new(16, 16);
    let mut rng = stream(7, Purpose::Probe, 0);
    let mask: Vec<bool> = (0..img.len()).map(|_| rng.random_bool(0.6)).collect();
    let dense: Vec<f64> = normal_vec(&mut rng, 5 * 12);
    vec![
        Box::new(Identity::new(img)),
        Box::new(MaskInpaint::new(img, mask).unwrap()),
        Box::new(MaskInpaint::centered_box(img, 6, 6).unwrap()),
        Box::new(Conv2d::gaussian(img, 7, 1.5).unwrap()),
        Box::new(Conv2d::motion(img, 5).unwrap()),
        Box::new(DownsampleAvg::square(img, 2).unwrap()),
        Box::new(DownsampleAvg::square(img, 4).unwrap()),
        Box::new(DenseLinear::new(ImageShape::line(12), Mat::from_row_major(5, 12, dense).unwrap()).unwrap()),
    ]
}

#[test]
fn adjoint_identity_on_random_probes() {
    let mut rng = stream(8, Purpose::Probe, 0);
    for op in linear_operators() {
        for _ in 0..100 {
            let x: Vec<f64> = normal_vec(&mut rng, op.input_len());
            let r: Vec<f64> = normal_vec(&mut rng, op.output_len());
            let lhs = dot(&op.apply(&x).unwrap(), &r);
            let rhs = dot(&x, &op.vjp(&x, &r).unwrap());
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            assert!((lhs - rhs).abs() / scale < 1e-10, "{}: {lhs} vs {rhs}", op.name());
        }
    }
}

fn linearity_defect(op: &dyn ForwardOperator<f64>, seed: u64) -> f64 {
    let mut rng = stream(seed, Purpose::Probe, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = normal_vec(&mut rng, op.input_len());
        let z: Vec<f64> = normal_vec(&mut rng, op.input_len());
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = op.apply(&mix).unwrap();
        let (ax, az) = (op.apply(&x).unwrap(), op.apply(&z).unwrap());
        let rhs: Vec<f64> = ax.iter().zip(&az).map(|(p, q)| a * p + b * q).collect();
        let d: Vec<f64> = lhs.iter().zip(&rhs).map(|(p, q)| p - q).collect();
        worst = worst.max(norm(&d) / norm(&rhs).max(1e-12));
    }
    worst
}

#[test]
fn linearity_probes_pass_for_linear_and_fail_for_nonlinear() {
    for op in linear_operators() {
        assert!(op.is_linear());
        assert!(linearity_defect(op.as_ref(), 1) < 1e-12, "{}", op.name());
        assert!(min_nonzero_singular(op.as_ref()).unwrap() > 0.0, "{}", op.name());
    }
    let img = ImageShape::new(8, 8);
    let nonlinear: Vec<Box<dyn ForwardOperator<f64>>> =
        vec![Box::new(HdrClip::new(img, 2.0).unwrap()), Box::new(PhaseMagnitude::new(img, 2).unwrap())];
    for op in nonlinear {
        assert!(!op.is_linear());
        assert!(linearity_defect(op.as_ref(), 2) > 1e-3, "{}", op.name());
    }
}

fn fd_vjp_error(op: &dyn ForwardOperator<f64>, x: &[f64], rng: &mut impl Rng) -> f64 {
    let r: Vec<f64> = normal_vec(rng, op.output_len());
    let d: Vec<f64> = normal_vec(rng, op.input_len());
    let eps = 1e-6;
    let f = |t: f64| {
        let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
        dot(&op.apply(&xt).unwrap(), &r)
    };
    let fd = (f(eps) - f(-eps)) / (2.0 * eps);
    let an = dot(&op.vjp(x, &r).unwrap(), &d);
    (fd - an).abs() / an.abs().max(1.0)
}

#[test]
fn nonlinear_vjps_match_finite_differences() {
    let img = ImageShape::new(8, 8);
    let mut rng = stream(9, Purpose::Probe, 0);
    let hdr = HdrClip::new(img, 2.0).unwrap();
    for _ in 0..20 {
        // keep every pixel away from the clip boundary |2x| = 1
        let x: Vec<f64> = (0..img.len())
            .map(|_| {
                let v: f64 = rng.random_range(0.0..0.8);
                let mag = if v < 0.4 { v } else { v + 0.2 };
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect();
        assert!(fd_vjp_error(&hdr, &x, &mut rng) < 1e-5);
    }
    let pm = PhaseMagnitude::new(img, 2).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = normal_vec(&mut rng, img.len());
        assert!(fd_vjp_error(&pm, &x, &mut rng) < 1e-5);
    }
}

#[test]
fn hand_examples() {
    let mask = MaskInpaint::new(ImageShape::line(3), vec![true, false, true]).unwrap();
    assert_eq!(mask.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 3.0]);
    let ds = DownsampleAvg::new(ImageShape::line(4), 1, 2).unwrap();
    assert_eq!(ds.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![2.0, 6.0]);
    let conv = Conv2d::line(2, vec![0.5_f64, 0.5]).unwrap();
    let out: Vec<f64> = conv.apply(&[1.0, 3.0]).unwrap();
    assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-15), "{out:?}");
    let id = Identity::new(ImageShape::line(3));
    let r = vec![0.1, -0.2, 0.3];
    assert_eq!(ForwardOperator::<f64>::vjp(&id, &[0.0; 3], &r).unwrap(), r);
}

#[test]
fn literal_convention_doubles_the_exact_gradient() {
    let mut rng = stream(10, Purpose::Probe, 0);
    for op in linear_operators() {
        let x: Vec<f64> = normal_vec(&mut rng, op.input_len());
        let y: Vec<f64> = normal_vec(&mut rng, op.output_len());
        let lit = likelihood_grad(op.as_ref(), &x, &y, 0.3, GradConvention::Literal).unwrap();
        let exact = likelihood_grad(op.as_ref(), &x, &y, 0.3, GradConvention::Exact).unwrap();
        for (a, b) in lit.iter().zip(&exact) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let r = residual(op.as_ref(), &x, &y).unwrap();
        let pred = op.apply(&x).unwrap();
        let direct: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((norm(&r) - direct).abs() < 1e-12 * direct);
    }
}

#[test]
fn phase_magnitude_ignores_global_sign() {
    let op = PhaseMagnitude::new(ImageShape::new(8, 8), 2).unwrap();
    let x: Vec<f64> = normal_vec(&mut stream(11, Purpose::Probe, 0), 64);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let (a, b) = (op.apply(&x).unwrap(), op.apply(&neg).unwrap());
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
}

#[test]
fn operators_are_deterministic_and_check_shapes() {
    for op in linear_operators() {
        let x: Vec<f64> = normal_vec(&mut stream(12, Purpose::Probe, 0), op.input_len());
        assert_eq!(op.apply(&x).unwrap(), op.apply(&x).unwrap());
        assert!(op.apply(&x[1..]).is_err());
        assert!(op.vjp(&x, &vec![0.0; op.output_len() + 1]).is_err());
    }
}
