//! Named task presets on 16×16 images (and one 2D posterior toy).
//!
//! A user config that names a preset is merged over it, so only the fields
//! that differ need to be written.

use serde_json::{json, Value};

pub const NAMES: [&str; 9] = [
    "identity",
    "inpaint",
    "gaussian_blur",
    "motion_blur",
    "sr4",
    "hdr",
    "phase_retrieval",
    "posterior2d",
    "minimal",
];

fn common(j: usize, eta0: f64) -> Value {
    json!({
        "sampler": "dapspp",
        "image": {"height": 16, "width": 16},
        "prior": {"kind": "image_gmm", "variance": 0.02, "length_scale": 2.5, "nugget": 1e-3},
        "measurement": {"gamma": 0.05},
        "schedule": {"sigma_max": 100.0, "sigma_min": 0.1, "n_steps": 51, "rho": -7.0},
        "step_size": {"eta0": eta0, "delta": 0.01},
        "refine": {
            "n_steps": j,
            "with_prior": false,
            "grad_convention": "literal",
            "likelihood_gamma": 0.01
        },
        "ode_steps_below_bar": 1,
        "ode_method": "rk4",
        "seeds": [0]
    })
}

fn with(mut base: Value, over: Value) -> Value {
    crate::config::deep_merge(&mut base, &over);
    base
}

/// Preset as a JSON object, or `None` for an unknown name.
pub fn preset(name: &str) -> Option<Value> {
    let v = match name {
        "identity" => with(
            common(8, 1e-4),
            json!({
                "prior": {"kind": "isotropic", "mean": 0.5, "tau2": 0.05},
                "operator": {"kind": "identity"},
                "schedule": {"sigma_min": 0.05}
            }),
        ),
        "inpaint" => with(common(5, 1e-4), json!({"operator": {"kind": "inpaint", "hole": [8, 8]}})),
        "gaussian_blur" => with(
            common(8, 1e-4),
            json!({"operator": {"kind": "gaussian_blur", "size": 7, "std": 1.5}}),
        ),
        "motion_blur" => with(common(8, 1e-4), json!({"operator": {"kind": "motion_blur", "taps": 5}})),
        "sr4" => with(common(2, 1e-3), json!({"operator": {"kind": "downsample", "factor": 4}})),
        "hdr" => with(common(5, 2.5e-5), json!({"operator": {"kind": "hdr", "alpha": 2.0}})),
        "phase_retrieval" => with(common(5, 2.5e-5), json!({"operator": {"kind": "phase", "oversample": 2}})),
        "posterior2d" => with(
            common(5, 1e-4),
            json!({
                "image": {"height": 1, "width": 2},
                "prior": {
                    "kind": "gmm",
                    "weights": [0.5, 0.5],
                    "means": [[1.0, 1.0], [-1.0, -1.0]],
                    "covariances": [[[0.5, 0.3], [0.3, 0.5]], [[0.5, 0.3], [0.3, 0.5]]]
                },
                "operator": {"kind": "inpaint", "mask": [1.0, 0.0]},
                "measurement": {"gamma": 0.1, "y": [0.2]},
                "sigma_bar": 1.0
            }),
        ),
        // cheap smoke-test setup: 4×4 isotropic prior, 11-point schedule
        "minimal" => with(
            common(3, 1e-4),
            json!({
                "image": {"height": 4, "width": 4},
                "prior": {"kind": "isotropic", "mean": 0.5, "tau2": 0.05},
                "operator": {"kind": "gaussian_blur", "size": 3, "std": 1.0},
                "schedule": {"n_steps": 11}
            }),
        ),
        _ => return None,
    };
    Some(with(v, json!({ "preset": name })))
}
