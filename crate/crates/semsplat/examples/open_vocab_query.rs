//! Map a short orbit, then query the rendered language map by class name:
//! relevancy heatmap, segmentation mask, and localization.
//!
//!     cargo run --release --example open_vocab_query

use semsplat::codec::train_stage1_offline;
use semsplat::config::PipelineConfig;
use semsplat::eval2d;
use semsplat::mapper::run_pipeline;
use semsplat::render::render_frame;
use semsplat::scene::CameraModel;
use semsplat::synth::{
    self, demo_room, Codebook, FrameSource, NoiseConfig, SyntheticSource, Trajectory,
    MASK_BACKGROUND,
};

fn main() -> semsplat::Result<()> {
    let frames = 16;
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
            fx: 120.0,
            fy: 120.0,
            cx: 63.5,
            cy: 63.5,
            width: 128,
            height: 128,
            depth_scale: 5000.0,
        },
        codebook: codebook.clone(),
        frames,
        feat_size: (64, 64),
        noise: NoiseConfig::default(),
    };

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
    cfg.mapper.mapping_iters = 100;
    let result = run_pipeline(&source, stage1, &cfg)?;

    // query the middle frame's rendered language map
    let camera = source.camera();
    let fi = frames / 2;
    let out = render_frame(&result.field, &camera, &result.trajectory[fi], cfg.run.mode);
    let mask_gt = source.mask(fi)?.unwrap();
    std::fs::create_dir_all("example_out").ok();
    for name in codebook.names() {
        let query = codebook.query_embedding(name)?;
        let rel = eval2d::relevancy_map(
            &out.feature,
            camera.width,
            camera.height,
            &result.codec,
            &query,
            cfg.eval.heatmap_kernel,
            cfg.eval.relevancy_threshold,
        )?;
        let class = codebook.index_of(name).unwrap() as u16;
        let gt: Vec<bool> = mask_gt.iter().map(|m| *m == class).collect();
        let visible = gt.iter().filter(|m| **m).count();
        if visible < 50 {
            println!("{name:8}: not visible in frame {fi}");
            continue;
        }
        let bbox = eval2d::bbox_of_mask(&gt, camera.width).unwrap();
        println!(
            "{name:8}: mIoU {:.3}, peak at {:?} ({})",
            eval2d::miou(&rel.mask, &gt),
            rel.peak,
            if eval2d::loc_hit(rel.peak, &bbox) {
                "inside the box"
            } else {
                "outside the box"
            }
        );
        let heat: Vec<f64> = rel
            .smoothed
            .iter()
            .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .flat_map(|t| [t, t * 0.4, 1.0 - t])
            .collect();
        synth::color_to_png(
            format!("example_out/heat_{name}.png").as_ref(),
            camera.width,
            camera.height,
            &heat,
        )?;
    }
    let _ = mask_gt.iter().filter(|m| **m == MASK_BACKGROUND).count();
    println!("heatmaps written to example_out/heat_<class>.png");
    Ok(())
}
