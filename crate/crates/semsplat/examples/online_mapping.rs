//! Run the full online loop over a synthetic orbit and print the per-frame
//! log plus the trajectory error.
//!
//!     cargo run --release --example online_mapping

use nalgebra::Vector3;
use semsplat::codec::train_stage1_offline;
use semsplat::config::PipelineConfig;
use semsplat::eval2d;
use semsplat::mapper::run_pipeline;
use semsplat::scene::CameraModel;
use semsplat::synth::{demo_room, Codebook, FrameSource, NoiseConfig, SyntheticSource, Trajectory};

fn main() -> semsplat::Result<()> {
    let frames = 20;
    let feat_dim = 48;
    let scene = demo_room();
    let names = scene.class_names();
    let codebook = Codebook::generate(&names, feat_dim, 7);
    let source = SyntheticSource {
        scene,
        trajectory: Trajectory::Orbit {
            center: [0.0, 0.0, 0.4],
            radius: 2.6,
            height: 1.6,
            arc_deg: frames as f64,
        },
        camera: CameraModel {
            fx: 90.0,
            fy: 90.0,
            cx: 47.5,
            cy: 47.5,
            width: 96,
            height: 96,
            depth_scale: 5000.0,
        },
        codebook: codebook.clone(),
        frames,
        feat_size: (48, 48),
        noise: NoiseConfig::default(),
    };

    // quick pretraining corpus straight from the class vectors
    let mut corpus = Vec::new();
    for i in 0..codebook.len() {
        for _ in 0..256 {
            corpus.extend_from_slice(codebook.vector(i));
        }
    }
    let (stage1, _) = train_stage1_offline(&corpus, feat_dim, 16, 4, 200, 256, 3e-3, 9)?;

    let mut cfg = PipelineConfig::default();
    cfg.run.seed = 5;
    cfg.loss.lambda_photo = 0.99;
    cfg.codec.feat_dim = feat_dim;
    cfg.codec.code_mid = 16;
    cfg.codec.code_final = 8;
    cfg.codec.samples_per_keyframe = 512;
    cfg.codec.minibatch = 1024;
    cfg.mapper.tracking_iters = 80;
    cfg.mapper.mapping_iters = 80;
    // the wide-angle orbit rarely exposes novel area, so keyframe on a gap
    cfg.mapper.max_keyframe_gap = 3;

    let result = run_pipeline(&source, stage1, &cfg)?;
    println!("frame  kf  novelty(c/f)   track-loss  gaussians");
    for r in &result.records {
        println!(
            "{:5} {:>3}   {:.2} / {:.2}    {:.5}     {:6}",
            r.frame,
            if r.keyframe { "kf" } else { "" },
            r.novelty_color,
            r.novelty_language,
            r.track_loss,
            r.gaussians
        );
    }

    let est: Vec<Vector3<f64>> = result.trajectory.iter().map(|p| p.inverse().translation).collect();
    let gt: Vec<Vector3<f64>> = (0..frames)
        .map(|i| source.frame(i).unwrap().pose_gt.unwrap().inverse().translation)
        .collect();
    let ate = eval2d::ate_rmse(&est, &gt)?;
    println!("\nATE RMSE: {:.2} mm over {frames} frames", ate * 1000.0);
    println!("stage timings (ms): {:?}", result.timings);
    Ok(())
}
