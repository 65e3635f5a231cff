//! Build a small Gaussian map from one synthetic RGB-D view and render it:
//! color PNG, colorized depth PNG, and the raw language-code tensor.
//!
//!     cargo run --release --example render_scene

use semsplat::config::{OptimMode, PipelineConfig};
use semsplat::mapper;
use semsplat::render::render_frame;
use semsplat::scene::GaussianField;
use semsplat::synth::{self, demo_room, Codebook, FrameSource, NoiseConfig, SyntheticSource, Trajectory};

fn main() -> semsplat::Result<()> {
    let scene = demo_room();
    let names = scene.class_names();
    let codebook = Codebook::generate(&names, 48, 7);
    let source = SyntheticSource {
        scene,
        trajectory: Trajectory::Orbit {
            center: [0.0, 0.0, 0.4],
            radius: 2.6,
            height: 1.6,
            arc_deg: 30.0,
        },
        camera: semsplat::scene::CameraModel {
            fx: 180.0,
            fy: 180.0,
            cx: 95.5,
            cy: 95.5,
            width: 192,
            height: 192,
            depth_scale: 5000.0,
        },
        codebook,
        frames: 2,
        feat_size: (96, 96),
        noise: NoiseConfig::default(),
    };
    let camera = source.camera();
    let bundle = source.frame(0)?;
    let pose = bundle.pose_gt.unwrap();

    // seed Gaussians from back-projected depth, then refine briefly
    let mut cfg = PipelineConfig::default();
    cfg.codec.code_final = 8;
    cfg.mapper.insert_stride = 2;
    let mut field = GaussianField::new(8, 0);
    let alpha = vec![0.0; camera.width * camera.height];
    let feature_k = vec![0.0; camera.width * camera.height * 8];
    let inserted =
        mapper::insert_gaussians(&mut field, &bundle, &pose, &feature_k, &alpha, &camera, &cfg);
    println!("inserted {inserted} gaussians from one depth frame");

    let mut adam = semsplat::grad::AdamState::new(&field);
    let mut window = mapper::KeyframeWindow::new(1);
    window.push(mapper::KeyframeEntry {
        frame_index: 0,
        pose,
        color: bundle.color_gt.clone(),
        depth: bundle.depth_gt.clone(),
        feature_k,
    });
    let losses = mapper::optimize_window(&mut field, &window, &camera, &mut adam, &cfg, 120);
    println!(
        "refined 120 iterations: loss {:.4} -> {:.4}",
        losses[0],
        losses.last().unwrap()
    );

    // render from a nearby novel view
    let novel = source.frame(1)?.pose_gt.unwrap();
    let out = render_frame(&field, &camera, &novel, OptimMode::Disentangled);
    std::fs::create_dir_all("example_out").ok();
    synth::color_to_png("example_out/render_color.png".as_ref(), out.width, out.height, &out.color)?;
    synth::depth_to_png_colorized("example_out/render_depth.png".as_ref(), out.width, out.height, &out.depth)?;
    let feat32: Vec<f32> = out.feature.iter().map(|v| *v as f32).collect();
    synth::save_ften("example_out/render_feature.ften".as_ref(), out.height, out.width, 8, &feat32)?;
    println!("wrote example_out/render_color.png, render_depth.png, render_feature.ften");
    Ok(())
}
