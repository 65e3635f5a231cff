//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (run with `--nocapture` to see them all).

mod common;

use common::*;
use nalgebra::Vector3;
use rand::Rng;
use semsplat::codec::{self, eval_cosine, train_stage1_offline, TwoStageCodec};
use semsplat::commands::{self, SceneSpec, SequenceSpec};
use semsplat::config::{OptimMode, PipelineConfig};
use semsplat::eval2d;
use semsplat::eval3d;
use semsplat::grad::{
    backward_disentangled, backward_joint, loss_total, LossWeights, RenderTargets,
};
use semsplat::mapper;
use semsplat::render::render_frame;
use semsplat::scene::{CameraModel, GaussianField, PoseSE3};
use semsplat::synth::{
    self, demo_room, Codebook, FrameSource, NoiseConfig, SyntheticSource, Trajectory,
};
use std::path::Path;
use std::time::Instant;

// --- criterion 1: gradient correctness ------------------------------------------

#[derive(Clone, Copy)]
enum Terms {
    PhotoDepth,
    PhotoDepthIsoC,
    Feat,
    FeatIsoFTie,
    All,
}

fn eval_terms(
    field: &GaussianField,
    pose: &PoseSE3,
    cam: &CameraModel,
    tg: &RenderTargets,
    w: &LossWeights,
    mode: OptimMode,
    terms: Terms,
) -> f64 {
    let out = render_frame(field, cam, pose, mode);
    let l = loss_total(&out, field, tg, w).unwrap();
    match terms {
        Terms::PhotoDepth => l.photo_depth(),
        Terms::PhotoDepthIsoC => l.photo_depth() + l.lambda_iso * l.iso_c,
        Terms::Feat => l.lambda_feat * l.feat,
        Terms::FeatIsoFTie => {
            l.lambda_feat * l.feat + l.lambda_iso * l.iso_f + l.lambda_scale_tie * l.scale_tie
        }
        Terms::All => l.total(),
    }
}

fn fd_ok(analytic: f64, fd: f64) -> bool {
    let abs = (analytic - fd).abs();
    abs < 1e-8 || abs / analytic.abs().max(fd.abs()) < 1e-3
}

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let cam = camera(64, 64, 64.0);
    let k = 15;
    let mut rng = semsplat::rng::stream(101, "acc1");
    let field = image_covering_field(20, k, &mut rng);
    let pose = PoseSE3::identity().retract(&[0.02, -0.01, 0.015, 0.01, -0.02, 0.01]);
    let (c, d, ft) = offset_targets(&field, &cam, &pose, &mut rng);
    let tg = RenderTargets {
        color: &c,
        depth: &d,
        feature: &ft,
    };
    let w = LossWeights {
        lambda_photo: 0.85,
        lambda_feat: 1.0,
        lambda_iso: 0.02,
        lambda_scale_tie: 0.5,
    };
    let h = 1e-4;
    let n = field.count();
    let samples_per_class = 40usize;

    // which loss terms feed each parameter class's analytic gradient
    type Get = fn(&GaussianField) -> &Vec<f64>;
    type GetMut = fn(&mut GaussianField) -> &mut Vec<f64>;
    let classes: Vec<(&str, Terms, Terms, usize, Get, GetMut)> = vec![
        ("mean", Terms::PhotoDepth, Terms::All, 3 * n, |f| &f.mean, |f| &mut f.mean),
        ("rot_c", Terms::PhotoDepth, Terms::All, 4 * n, |f| &f.rot_c, |f| &mut f.rot_c),
        ("scale_c", Terms::PhotoDepthIsoC, Terms::All, 3 * n, |f| &f.log_scale_c, |f| &mut f.log_scale_c),
        ("opacity_c", Terms::PhotoDepth, Terms::All, n, |f| &f.opacity_c, |f| &mut f.opacity_c),
        ("color", Terms::PhotoDepth, Terms::All, 3 * n, |f| &f.color, |f| &mut f.color),
        ("rot_f", Terms::Feat, Terms::All, 4 * n, |f| &f.rot_f, |f| &mut f.rot_f),
        ("scale_f", Terms::FeatIsoFTie, Terms::All, 3 * n, |f| &f.log_scale_f, |f| &mut f.log_scale_f),
        ("opacity_f", Terms::Feat, Terms::All, n, |f| &f.opacity_f, |f| &mut f.opacity_f),
        ("feature", Terms::Feat, Terms::All, k * n, |f| &f.feature, |f| &mut f.feature),
    ];

    for mode in [OptimMode::Disentangled, OptimMode::Joint] {
        let out = render_frame(&field, &cam, &pose, mode);
        let grads = match mode {
            OptimMode::Disentangled => {
                backward_disentangled(&out, &field, &cam, &pose, &tg, &w).unwrap()
            }
            OptimMode::Joint => backward_joint(&out, &field, &cam, &pose, &tg, &w).unwrap(),
        };
        for (name, dis_terms, joint_terms, len, get, get_mut) in &classes {
            // joint mode trains the color-mode arrays only
            if mode == OptimMode::Joint && ["rot_f", "scale_f", "opacity_f"].contains(name) {
                continue;
            }
            let terms = match mode {
                OptimMode::Disentangled => *dis_terms,
                OptimMode::Joint => *joint_terms,
            };
            let analytic: &Vec<f64> = match (mode, *name) {
                (_, "mean") => &grads.mean,
                (_, "rot_c") => &grads.rot_c,
                (_, "scale_c") => &grads.log_scale_c,
                (_, "opacity_c") => &grads.opacity_c,
                (_, "color") => &grads.color,
                (_, "rot_f") => &grads.rot_f,
                (_, "scale_f") => &grads.log_scale_f,
                (_, "opacity_f") => &grads.opacity_f,
                (_, "feature") => &grads.feature,
                _ => unreachable!(),
            };
            let mut failed = 0usize;
            let mut checked = 0usize;
            for s in 0..samples_per_class.min(*len) {
                let idx = (s * 7919) % len; // fixed stride sample
                let mut fp = field.clone();
                let base = get(&fp)[idx];
                get_mut(&mut fp)[idx] = base + h;
                let lp = eval_terms(&fp, &pose, &cam, &tg, &w, mode, terms);
                get_mut(&mut fp)[idx] = base - h;
                let lm = eval_terms(&fp, &pose, &cam, &tg, &w, mode, terms);
                let fd = (lp - lm) / (2.0 * h);
                checked += 1;
                if !fd_ok(analytic[idx], fd) {
                    failed += 1;
                }
            }
            assert!(
                (failed as f64) <= 0.01 * checked as f64,
                "{mode:?} {name}: {failed}/{checked} coords outside 1e-3",
            );
        }
        // pose twist (color-mode path only in disentangled mode)
        let terms = match mode {
            OptimMode::Disentangled => Terms::PhotoDepth,
            OptimMode::Joint => Terms::All,
        };
        for kk in 0..6 {
            let mut tp = [0.0; 6];
            tp[kk] = h;
            let lp = eval_terms(&field, &pose.retract(&tp), &cam, &tg, &w, mode, terms);
            tp[kk] = -h;
            let lm = eval_terms(&field, &pose.retract(&tp), &cam, &tg, &w, mode, terms);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                fd_ok(grads.pose[kk], fd),
                "{mode:?} pose[{kk}]: analytic {} vs fd {fd}",
                grads.pose[kk]
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradcheck took {secs:.1} s");
    println!(
        "ACCEPTANCE 1 PASS — finite differences (h=1e-4) agree within 1e-3 for all parameter \
         classes in both modes ({secs:.1} s)"
    );
}

// --- criterion 2: compositing oracle ----------------------------------------------

#[test]
fn criterion_02_compositing_oracle() {
    let cam = camera(64, 64, 60.0);
    let mut worst = 0.0f64;
    for scene_idx in 0..20u64 {
        let mut rng = semsplat::rng::stream(scene_idx, "acc2");
        let field = random_field(40, 5, &mut rng);
        let pose = PoseSE3::identity().retract(&[
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
        ]);
        let fast = render_frame(&field, &cam, &pose, OptimMode::Disentangled);
        let reference = reference_render(&field, &cam, &pose);
        for (a, b) in fast.color.iter().zip(&reference.color) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in fast.depth.iter().zip(&reference.depth) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in fast.feature.iter().zip(&reference.feature) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in fast.alpha_acc_c.iter().zip(&reference.alpha_c) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-6, "scene {scene_idx}: max pixel deviation {worst}");

        // per-pixel weights: Σw = 1 − T, w ≥ 0, T monotone non-increasing
        for mode in [semsplat::scene::Mode::Color, semsplat::scene::Mode::Language] {
            let weights = fast.pixel_weights(mode);
            let acc = match mode {
                semsplat::scene::Mode::Color => &fast.alpha_acc_c,
                semsplat::scene::Mode::Language => &fast.alpha_acc_f,
            };
            for (p, list) in weights.iter().enumerate() {
                let mut t = 1.0;
                for (_, w) in list {
                    assert!(*w >= 0.0);
                    let t_next = t - w;
                    assert!(t_next <= t + 1e-15, "transmittance increased");
                    t = t_next;
                }
                assert!((1.0 - t - acc[p]).abs() < 1e-12, "Σw != 1 - T at pixel {p}");
            }
        }
    }
    println!("ACCEPTANCE 2 PASS — tiled renderer matches the literal blending sums (max deviation {worst:.2e})");
}

// --- criterion 3: disentanglement isolation ----------------------------------------

#[test]
fn criterion_03_disentanglement_isolation() {
    let cam = camera(64, 64, 60.0);
    let mut rng = semsplat::rng::stream(3, "acc3");
    let field = random_field(30, 4, &mut rng);
    let pose = PoseSE3::identity();
    let base = render_frame(&field, &cam, &pose, OptimMode::Disentangled);

    // perturb every language-mode parameter: color and depth bit-identical
    let mut lang = field.clone();
    for i in 0..lang.count() {
        lang.rot_f[4 * i + 2] += 0.2;
        lang.log_scale_f[3 * i] += 0.3;
        lang.opacity_f[i] -= 0.4;
        lang.feature[i * 4] += 1.0;
    }
    lang.renormalize_rotations();
    let lang_out = render_frame(&lang, &cam, &pose, OptimMode::Disentangled);
    assert_eq!(base.color, lang_out.color, "color changed under language perturbation");
    assert_eq!(base.depth, lang_out.depth, "depth changed under language perturbation");
    assert_ne!(base.feature, lang_out.feature);

    // and vice versa: color-mode parameters leave the feature render alone
    let mut col = field.clone();
    for i in 0..col.count() {
        col.rot_c[4 * i + 1] += 0.2;
        col.log_scale_c[3 * i + 1] += 0.3;
        col.opacity_c[i] += 0.4;
        col.color[i * 3] = (col.color[i * 3] + 0.3).min(1.0);
    }
    col.renormalize_rotations();
    let col_out = render_frame(&col, &cam, &pose, OptimMode::Disentangled);
    assert_eq!(base.feature, col_out.feature, "features changed under color perturbation");
    assert_ne!(base.color, col_out.color);

    // joint mode entangles: the shared-opacity gradient feels the feature
    // residual, and perturbing the shared geometry moves both channels
    let joint_out = render_frame(&field, &cam, &pose, OptimMode::Joint);
    let (c, d, ft) = offset_targets(&field, &cam, &pose, &mut rng);
    let w = LossWeights::default();
    let tg = RenderTargets { color: &c, depth: &d, feature: &ft };
    let g_with = backward_joint(&joint_out, &field, &cam, &pose, &tg, &w).unwrap();
    let tg_zero_feat = RenderTargets { color: &c, depth: &d, feature: &joint_out.feature };
    let g_without = backward_joint(&joint_out, &field, &cam, &pose, &tg_zero_feat, &w).unwrap();
    assert_ne!(g_with.opacity_c, g_without.opacity_c, "joint alpha gradient ignores features");

    let mut joint_pert = field.clone();
    for i in 0..joint_pert.count() {
        joint_pert.rot_c[4 * i + 1] += 0.2;
    }
    joint_pert.renormalize_rotations();
    let joint_pert_out = render_frame(&joint_pert, &cam, &pose, OptimMode::Joint);
    assert_ne!(joint_out.color, joint_pert_out.color);
    assert_ne!(joint_out.feature, joint_pert_out.feature);
    println!("ACCEPTANCE 3 PASS — language-mode perturbations leave color/depth bit-identical; joint mode provably entangles");
}

// --- shared pipeline fixtures -------------------------------------------------------

fn orbit_source(
    frames: usize,
    feat_dim: usize,
    cam: CameraModel,
    feat_size: (usize, usize),
    noise: f64,
    seed: u64,
) -> SyntheticSource {
    let scene = demo_room();
    let names = scene.class_names();
    let codebook = Codebook::generate(&names, feat_dim, seed);
    SyntheticSource {
        scene,
        trajectory: Trajectory::Orbit {
            center: [0.0, 0.0, 0.4],
            radius: 2.6,
            height: 1.6,
            arc_deg: frames as f64, // one degree per frame
        },
        camera: cam,
        codebook,
        frames,
        feat_size,
        noise: NoiseConfig { sigma: noise, seed },
    }
}

/// Corpus of per-pixel class vectors sampled from a source, background
/// skipped.
fn corpus_from_source(source: &SyntheticSource, frames: usize, seed: u64) -> Vec<f64> {
    let mut rng = semsplat::rng::stream(seed, "acc-corpus");
    let dim = source.codebook.dim();
    let mut corpus = Vec::new();
    for i in 0..frames.min(source.frames) {
        let b = source.frame(i).unwrap();
        let n = b.feat_width * b.feat_height;
        let mut taken = 0;
        let mut tries = 0;
        while taken < 600 && tries < 4 * n {
            tries += 1;
            let p = rng.gen_range(0..n);
            let v = &b.feature_gt_hi[p * dim..(p + 1) * dim];
            if v.iter().all(|x| x.abs() < 1e-12) {
                continue;
            }
            corpus.extend(v.iter().map(|x| *x as f64));
            taken += 1;
        }
    }
    corpus
}

fn pipeline_config(feat_dim: usize, code_mid: usize, k: usize, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run.seed = seed;
    cfg.loss.lambda_photo = 0.99;
    cfg.codec.feat_dim = feat_dim;
    cfg.codec.code_mid = code_mid;
    cfg.codec.code_final = k;
    cfg.codec.samples_per_keyframe = 1024;
    cfg.codec.minibatch = 1024;
    cfg.mapper.tracking_iters = 100;
    cfg.mapper.mapping_iters = 150;
    // slow synthetic orbits rarely clear the novelty bar; keyframe on a gap
    cfg.mapper.max_keyframe_gap = 3;
    cfg
}

// --- criterion 4: disentangled beats joint -----------------------------------------

#[test]
fn criterion_04_disentangled_beats_joint() {
    let t0 = Instant::now();
    let cam = camera(96, 96, 90.0);
    let frames = 12;
    for seed in [11u64, 12, 13] {
        let source = orbit_source(frames, 48, cam, (48, 48), 0.0, seed);
        let corpus = corpus_from_source(&source, 4, seed);
        let (stage1, _) =
            train_stage1_offline(&corpus, 48, 16, 4, 250, 256, 3e-3, seed).unwrap();
        let mut psnr = Vec::new();
        let mut photo = Vec::new();
        for mode in [OptimMode::Disentangled, OptimMode::Joint] {
            let mut cfg = pipeline_config(48, 16, 8, seed);
            cfg.run.mode = mode;
            cfg.mapper.mapping_iters = 60; // per the ablation protocol
            cfg.mapper.tracking_iters = 80;
            let result = mapper::run_pipeline(&source, stage1.clone(), &cfg).unwrap();
            let mut psnr_sum = 0.0;
            let mut photo_sum = 0.0;
            let mut count = 0.0;
            for i in (0..frames).step_by(3) {
                let bundle = source.frame(i).unwrap();
                let out = render_frame(&result.field, &cam, &result.trajectory[i], mode);
                psnr_sum += eval2d::psnr(&out.color, &bundle.color_gt);
                photo_sum += out
                    .color
                    .iter()
                    .zip(&bundle.color_gt)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / out.color.len() as f64;
                count += 1.0;
            }
            psnr.push(psnr_sum / count);
            photo.push(photo_sum / count);
        }
        assert!(
            psnr[0] >= psnr[1],
            "seed {seed}: PSNR disentangled {:.2} < joint {:.2}",
            psnr[0],
            psnr[1]
        );
        assert!(
            photo[0] < photo[1],
            "seed {seed}: color loss disentangled {:.4} >= joint {:.4}",
            photo[0],
            photo[1]
        );
        println!(
            "  seed {seed}: PSNR {:.2} vs {:.2} dB, color L1 {:.4} vs {:.4}",
            psnr[0], psnr[1], photo[0], photo[1]
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 600.0, "criterion 4 took {secs:.0} s");
    println!(
        "ACCEPTANCE 4 PASS — disentangled rendering beats joint on all 3 seeds ({secs:.0} s)"
    );
}

// --- criterion 5: compression monotonicity ------------------------------------------

#[test]
fn criterion_05_compression_monotonicity() {
    // shallow (2+2 layer) autoencoders train to their capacity limit on a
    // CPU budget, so the cosine ordering reflects code size, not leftover
    // optimization error
    let dim = 192;
    let corpus = synth::spectrum_corpus(dim, 4096, 55);
    let n = corpus.len() / dim;
    let mut cosines = Vec::new();
    for code in [128usize, 64, 32, 20] {
        let (codec, _) =
            train_stage1_offline(&corpus, dim, code, 2, 1600, 256, 5e-3, 56).unwrap();
        let cos = eval_cosine(&codec, &corpus, n);
        println!("  code {code}: round-trip cosine {cos:.4}");
        cosines.push(cos);
    }
    for w in cosines.windows(2) {
        assert!(
            w[0] >= w[1],
            "cosine increased as the code shrank: {cosines:?}"
        );
    }
    assert!(cosines[2] > 0.95, "code-32 cosine {} too low", cosines[2]);
    println!(
        "ACCEPTANCE 5 PASS — reconstruction cosine non-increasing over codes 128/64/32/20: {:?}",
        cosines.iter().map(|c| (c * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
}

// --- criterion 6: online stage adequacy and schedule audit ---------------------------

#[test]
fn criterion_06_online_codec_adequacy() {
    let dim = 96;
    let classes = 12usize;
    let names: Vec<String> = (0..classes).map(|i| format!("class{i}")).collect();
    let book = Codebook::generate(&names, dim, 66);
    let mut rng = semsplat::rng::stream(66, "acc6");
    let n = 4096;
    let mut corpus = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        for kk in 0..dim {
            corpus.push(book.vector(c)[kk] + 0.02 * synth::gaussian(&mut rng));
        }
    }
    let (stage1, _) = train_stage1_offline(&corpus, dim, 32, 4, 400, 256, 3e-3, 67).unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.codec.feat_dim = dim;
    cfg.codec.code_mid = 32;
    cfg.codec.code_final = 15;
    cfg.codec.samples_per_keyframe = 1024;
    cfg.codec.minibatch = 2048;
    let mut two = TwoStageCodec::new(stage1, &cfg.codec, 68);
    let kf0: Vec<f32> = corpus[..1024 * dim].iter().map(|v| *v as f32).collect();
    two.buffer_keyframe(&kf0, dim, 0).unwrap();
    two.init_online().unwrap();
    assert_eq!(two.init_iterations, 200, "init phase must run exactly 200 iterations");

    let kf1: Vec<f32> = corpus[1024 * dim..2048 * dim].iter().map(|v| *v as f32).collect();
    two.step_online(&kf1, dim).unwrap();
    two.buffer_keyframe(&kf1, dim, 1).unwrap();
    let kf2: Vec<f32> = corpus[2048 * dim..3072 * dim].iter().map(|v| *v as f32).collect();
    two.step_online(&kf2, dim).unwrap();
    two.buffer_keyframe(&kf2, dim, 2).unwrap();
    for _ in 0..6 {
        two.step_online(&kf2, dim).unwrap();
    }
    for (i, (iters, replay)) in two.step_log.iter().enumerate() {
        assert_eq!(*iters, 1, "step {i} ran {iters} iterations");
        let expected = 2.min(i + 1);
        assert_eq!(*replay, expected, "step {i} used {replay} replay keyframes");
    }

    // argmax class relevancy preserved through encode2 ∘ decode2
    let test_n = 2048;
    let test = &corpus[..test_n * dim];
    let codes = two.encode2(test, test_n).unwrap();
    let recon = two.decode2(&codes, test_n).unwrap();
    let mut agree = 0;
    for i in 0..test_n {
        let a = nearest_class(&test[i * dim..(i + 1) * dim], &book);
        let b = nearest_class(&recon[i * dim..(i + 1) * dim], &book);
        if a == b {
            agree += 1;
        }
    }
    let frac = agree as f64 / test_n as f64;
    assert!(frac >= 0.99, "argmax preserved for only {frac:.4}");
    println!(
        "ACCEPTANCE 6 PASS — argmax relevancy preserved for {:.2}% of samples; init = 200 iters, \
         1 iter/frame with 2 replay keyframes",
        frac * 100.0
    );
}

fn nearest_class(v: &[f64], book: &Codebook) -> usize {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for i in 0..book.len() {
        let b = book.vector(i);
        let dot: f64 = b.iter().zip(v).map(|(a, c)| a * c).sum();
        if dot / nv > best_cos {
            best_cos = dot / nv;
            best = i;
        }
    }
    best
}

// --- criterion 7: end-to-end query accuracy ------------------------------------------

fn walled_spec(frames: usize, noise_sigma: f64) -> SceneSpec {
    SceneSpec {
        camera: CameraModel {
            fx: 180.0,
            fy: 180.0,
            cx: 95.5,
            cy: 95.5,
            width: 192,
            height: 192,
            depth_scale: 5000.0,
        },
        sequence: SequenceSpec {
            frames,
            feat_width: 96,
            feat_height: 96,
            feat_dim: 96,
            noise_sigma,
        },
        trajectory: Trajectory::Orbit {
            center: [0.0, 0.0, 0.4],
            radius: 2.6,
            height: 1.6,
            arc_deg: frames as f64,
        },
        prims: demo_room().prims,
    }
}

#[test]
fn criterion_07_end_to_end_query_accuracy() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path();

    // noise-free sequence through the full command-line surface
    let spec = walled_spec(30, 0.0);
    let spec_path = base.join("scene.toml");
    spec.save(&spec_path).unwrap();
    let seq = base.join("seq");
    commands::cmd_gen(&spec_path, &seq, 5).unwrap();
    let stage1 = base.join("stage1.mlpc");
    let cosine = commands::cmd_train_stage1(&[seq.clone()], 32, &stage1, 300, 6).unwrap();
    assert!(cosine > 0.99, "stage-1 cosine {cosine}");

    let queries = base.join("queries.txt");
    let source = spec.source(5);
    std::fs::write(&queries, source.codebook.names().join("\n")).unwrap();

    let mut cfg = pipeline_config(96, 32, 15, 9);
    let run_dir = base.join("run");
    commands::cmd_run(&seq, &stage1, &cfg, &run_dir).unwrap();
    let report = commands::cmd_eval(&run_dir, &queries, false).unwrap();
    assert!(report.skipped_queries.is_empty());
    for q in &report.queries {
        assert!(
            (q.loc_accuracy - 1.0).abs() < 1e-12,
            "{}: Loc {} < 1.0 (noise-free)",
            q.query,
            q.loc_accuracy
        );
        assert!(q.mean_miou >= 0.8, "{}: mIoU {:.3} < 0.8", q.query, q.mean_miou);
        println!("  noise-free {}: mIoU {:.3}, Loc {:.2}", q.query, q.mean_miou, q.loc_accuracy);
    }

    // σ = 0.05 feature noise: localization stays ≥ 0.9
    let spec_n = walled_spec(30, 0.05);
    let spec_n_path = base.join("scene_noise.toml");
    spec_n.save(&spec_n_path).unwrap();
    let seq_n = base.join("seq_noise");
    commands::cmd_gen(&spec_n_path, &seq_n, 5).unwrap();
    cfg.run.seed = 10;
    let run_n = base.join("run_noise");
    commands::cmd_run(&seq_n, &stage1, &cfg, &run_n).unwrap();
    let report_n = commands::cmd_eval(&run_n, &queries, false).unwrap();
    for q in &report_n.queries {
        assert!(
            q.loc_accuracy >= 0.9,
            "{}: Loc {} < 0.9 under σ=0.05",
            q.query,
            q.loc_accuracy
        );
        println!("  σ=0.05 {}: mIoU {:.3}, Loc {:.2}", q.query, q.mean_miou, q.loc_accuracy);
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 900.0, "criterion 7 took {secs:.0} s");
    println!(
        "ACCEPTANCE 7 PASS — noise-free orbit: Loc = 1.0 and mIoU ≥ 0.8 on every query; \
         σ=0.05: Loc ≥ 0.9 ({secs:.0} s)"
    );
}

// --- criterion 8: tracking under noisy initialization ---------------------------------

#[test]
fn criterion_08_tracking_ate() {
    let t0 = Instant::now();
    let cam = camera(128, 128, 120.0);
    let source = orbit_source(30, 48, cam, (64, 64), 0.0, 21);
    let corpus = corpus_from_source(&source, 4, 21);
    let (stage1, _) = train_stage1_offline(&corpus, 48, 16, 4, 250, 256, 3e-3, 22).unwrap();
    let mut cfg = pipeline_config(48, 16, 8, 23);
    cfg.mapper.pose_init_trans_noise = 0.01;
    cfg.mapper.pose_init_rot_noise_deg = 1.0;
    let result = mapper::run_pipeline(&source, stage1, &cfg).unwrap();

    let est: Vec<Vector3<f64>> = result.trajectory.iter().map(|p| p.inverse().translation).collect();
    let gt: Vec<Vector3<f64>> = (0..source.frames)
        .map(|i| source.frame(i).unwrap().pose_gt.unwrap().inverse().translation)
        .collect();
    let ate = eval2d::ate_rmse(&est, &gt).unwrap();
    assert!(ate < 0.01, "ATE {ate:.4} m >= 1 cm");
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "ACCEPTANCE 8 PASS — ATE RMSE {:.2} mm with 1 cm / 1° per-frame initialization error ({secs:.0} s)",
        ate * 1000.0
    );
}

// --- criterion 9: 3D protocol ----------------------------------------------------------

#[test]
fn criterion_09_threed_protocol() {
    // analytic room: interior of a 4.0 × 4.0 × 2.4 box, 0.20 m voxels
    let half = Vector3::new(2.0, 2.0, 1.2);
    let room_sdf = |p: &Vector3<f64>| -> f64 {
        // signed distance of the interior surface (negative inside walls)
        let q = Vector3::new(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
        let inside_dist = q.x.max(q.y).max(q.z);
        -inside_dist
    };
    let voxel = 0.20;
    let dims = [26, 26, 18];
    let origin = Vector3::new(-2.6, -2.6, -1.8);
    let mut vol = eval3d::TsdfVolume::new(origin, voxel, dims, 1);
    let trunc = vol.truncation();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = vol.index(x, y, z);
                vol.tsdf[i] = (room_sdf(&vol.center(x, y, z)) / trunc).clamp(-1.0, 1.0);
                vol.weight[i] = 1.0;
            }
        }
    }
    let mesh = eval3d::marching_cubes(&vol);
    assert!(mesh.vertices.len() > 500);
    let good = mesh
        .vertices
        .iter()
        .filter(|v| room_sdf(v).abs() <= voxel / 2.0)
        .count();
    let frac = good as f64 / mesh.vertices.len() as f64;
    assert!(frac >= 0.95, "only {frac:.3} of vertices within voxel/2");

    // chamfer matches brute force exactly on 100-point sets
    let mut rng = semsplat::rng::stream(9, "acc9");
    let pa: Vec<Vector3<f64>> = (0..100)
        .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let pb: Vec<Vector3<f64>> = (0..100)
        .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let fast = eval3d::chamfer(&pa, &pb).unwrap();
    let mut brute = 0.0;
    for p in &pa {
        brute += pb.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
    }
    for q in &pb {
        brute += pa.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
    }
    assert!((fast - 0.5 * (brute / 100.0)).abs() < 1e-12);

    // emd matches factorial enumeration up to 7 points
    for n in 2..=7usize {
        let sa: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let sb: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let fast = eval3d::emd(&sa, &sb, 512, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| (sa[i] - sb[j]).norm()).sum();
            best = best.min(c);
        });
        assert!((fast - best / n as f64).abs() < 1e-9, "emd mismatch at n={n}");
    }

    // failure rule reproduces the worked examples
    let out = eval3d::apply_failure_rule(&[Some(1.0), Some(1.0), Some(1.0), Some(1.0)]).unwrap();
    assert_eq!((out.threshold, out.failures, out.mean), (1.0, 0, Some(1.0)));
    let out = eval3d::apply_failure_rule(&[Some(1.0), Some(1.0), Some(1.0), Some(100.0)]).unwrap();
    assert!((out.threshold - (25.75 + 2.0 * 1837.6875f64.sqrt())).abs() < 1e-9);
    assert_eq!(out.failures, 0);
    let mut d = vec![Some(0.0); 9];
    d.push(Some(10.0));
    let out = eval3d::apply_failure_rule(&d).unwrap();
    assert_eq!((out.threshold, out.failures, out.mean), (7.0, 1, Some(0.0)));

    println!(
        "ACCEPTANCE 9 PASS — room surface within voxel/2 for {:.1}% of vertices; CD/EMD exact \
         against brute force; failure rule matches hand-computed thresholds",
        frac * 100.0
    );
}

fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        f(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, f);
        perm.swap(k, i);
    }
}

// --- criterion 10: determinism -----------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path();
    let cam = camera(64, 64, 60.0);
    let source = orbit_source(10, 32, cam, (32, 32), 0.0, 31);
    let seq = base.join("seq");
    std::fs::create_dir_all(&seq).unwrap();
    synth::write_sequence(&seq, &source, &source.codebook).unwrap();
    let corpus = corpus_from_source(&source, 3, 31);
    let (stage1, _) = train_stage1_offline(&corpus, 32, 12, 3, 150, 256, 3e-3, 32).unwrap();
    let stage1_path = base.join("stage1.mlpc");
    codec::save_codec(&stage1, &stage1_path).unwrap();

    let mut cfg = pipeline_config(32, 12, 6, 33);
    cfg.mapper.tracking_iters = 40;
    cfg.mapper.mapping_iters = 40;

    let artifacts = ["map.ply", "trajectory.txt", "metrics.json"];
    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();

    // identical seeds, repeated runs
    let run_a = base.join("a");
    let run_b = base.join("b");
    commands::cmd_run(&seq, &stage1_path, &cfg, &run_a).unwrap();
    commands::cmd_run(&seq, &stage1_path, &cfg, &run_b).unwrap();
    for name in artifacts {
        assert_eq!(read(&run_a, name), read(&run_b, name), "{name} differs across runs");
    }

    // across thread counts
    let mut cfg1 = cfg.clone();
    cfg1.run.threads = 1;
    let mut cfg4 = cfg.clone();
    cfg4.run.threads = 4;
    let run_t1 = base.join("t1");
    let run_t4 = base.join("t4");
    commands::cmd_run(&seq, &stage1_path, &cfg1, &run_t1).unwrap();
    commands::cmd_run(&seq, &stage1_path, &cfg4, &run_t4).unwrap();
    for name in artifacts {
        assert_eq!(read(&run_t1, name), read(&run_t4, name), "{name} differs across thread counts");
    }

    // evaluation reports are reproducible too
    let queries = base.join("queries.txt");
    std::fs::write(&queries, source.codebook.names().join("\n")).unwrap();
    commands::cmd_eval(&run_a, &queries, false).unwrap();
    commands::cmd_eval(&run_b, &queries, false).unwrap();
    assert_eq!(
        read(&run_a, "eval_report.json"),
        read(&run_b, "eval_report.json"),
        "eval reports differ"
    );

    // a different seed changes the artifacts
    let mut cfg_other = cfg.clone();
    cfg_other.run.seed = 99;
    let run_c = base.join("c");
    commands::cmd_run(&seq, &stage1_path, &cfg_other, &run_c).unwrap();
    assert_ne!(read(&run_a, "map.ply"), read(&run_c, "map.ply"));

    println!("ACCEPTANCE 10 PASS — maps, trajectories and reports bit-identical across runs and thread counts");
}

// --- criterion 11: performance floor -------------------------------------------------------

#[test]
fn criterion_11_performance_floor() {
    let report = commands::cmd_bench(10_000, 192, 192, 9, &[1, 8], 41).unwrap();
    let eight = report.threads.iter().find(|r| r.threads == 8).unwrap();
    let one = report.threads.iter().find(|r| r.threads == 1).unwrap();
    assert_eq!(one.checksum, eight.checksum, "render differs across thread counts");
    assert!(
        eight.forward_backward_median_ms < 250.0,
        "forward+backward {:.1} ms >= 250 ms",
        eight.forward_backward_median_ms
    );
    println!(
        "ACCEPTANCE 11 PASS — forward+backward for 10k Gaussians at 192×192: {:.1} ms median \
         (floor 250 ms); bit-identical across thread counts",
        eight.forward_backward_median_ms
    );
}
