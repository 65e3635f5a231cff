//! Compare the analytic gradients against central finite differences for a
//! few coordinates of every parameter class.
//!
//!     cargo run --release --example gradient_check

use nalgebra::Vector3;
use rand::Rng;
use semsplat::config::OptimMode;
use semsplat::geom;
use semsplat::grad::{backward_disentangled, loss_total, LossWeights, RenderTargets};
use semsplat::render::render_frame;
use semsplat::scene::{CameraModel, GaussianField, GaussianInit, PoseSE3};

fn main() {
    let cam = CameraModel {
        fx: 48.0,
        fy: 48.0,
        cx: 23.5,
        cy: 23.5,
        width: 48,
        height: 48,
        depth_scale: 5000.0,
    };
    let k = 6;
    let mut rng = semsplat::rng::stream(11, "example-fd");
    let mut field = GaussianField::new(k, 12);
    for _ in 0..12 {
        field.push(&GaussianInit {
            mean: Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(1.5..3.0),
            ),
            rotation: geom::quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            // image-covering splats keep finite differences clean
            log_scale: Vector3::new(
                rng.gen_range(0.1..0.7),
                rng.gen_range(0.1..0.7),
                rng.gen_range(0.1..0.7),
            ),
            opacity_logit: rng.gen_range(-1.0..1.5),
            color: [rng.gen(), rng.gen(), rng.gen()],
            feature: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    field.renormalize_rotations();
    let pose = PoseSE3::identity();
    let base = render_frame(&field, &cam, &pose, OptimMode::Disentangled);
    let color: Vec<f64> = base.color.iter().map(|v| v + 0.2).collect();
    let depth: Vec<f64> = base.depth.iter().map(|v| v + 0.15).collect();
    let feature: Vec<f64> = base.feature.iter().map(|v| v - 0.2).collect();
    let targets = RenderTargets {
        color: &color,
        depth: &depth,
        feature: &feature,
    };
    let weights = LossWeights::default();
    let grads = backward_disentangled(&base, &field, &cam, &pose, &targets, &weights).unwrap();

    let h = 1e-4;
    // every class checks the photometric + depth path except the language
    // set, which the feature loss drives
    let cases: Vec<(&str, Vec<f64>, bool)> = vec![
        ("mean", grads.mean.clone(), false),
        ("rot_c", grads.rot_c.clone(), false),
        ("opacity_c", grads.opacity_c.clone(), false),
        ("color", grads.color.clone(), false),
        ("rot_f", grads.rot_f.clone(), true),
        ("opacity_f", grads.opacity_f.clone(), true),
        ("feature", grads.feature.clone(), true),
    ];
    for (name, analytic, lang) in cases {
        let mut worst = 0.0f64;
        fn arr<'a>(f: &'a mut GaussianField, name: &str) -> &'a mut Vec<f64> {
            match name {
                "mean" => &mut f.mean,
                "rot_c" => &mut f.rot_c,
                "opacity_c" => &mut f.opacity_c,
                "color" => &mut f.color,
                "rot_f" => &mut f.rot_f,
                "opacity_f" => &mut f.opacity_f,
                _ => &mut f.feature,
            }
        }
        for idx in (0..analytic.len()).step_by(analytic.len().div_ceil(6)) {
            let mut fp = field.clone();
            let eval = |f: &GaussianField| {
                let out = render_frame(f, &cam, &pose, OptimMode::Disentangled);
                let l = loss_total(&out, f, &targets, &weights).unwrap();
                if lang {
                    l.lambda_feat * l.feat
                } else {
                    l.photo_depth()
                }
            };
            let v0 = arr(&mut fp, name)[idx];
            arr(&mut fp, name)[idx] = v0 + h;
            let lp = eval(&fp);
            arr(&mut fp, name)[idx] = v0 - h;
            let lm = eval(&fp);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        println!("{name:10}: worst relative error vs finite differences {worst:.2e}");
    }
}
