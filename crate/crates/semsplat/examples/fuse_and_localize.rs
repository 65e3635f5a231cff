//! Fuse multi-view renders into a TSDF volume, extract the language mesh,
//! and localize queries in 3D with Chamfer / Earth Mover's scoring.
//!
//!     cargo run --release --example fuse_and_localize

use nalgebra::Vector3;
use semsplat::codec::train_stage1_offline;
use semsplat::config::PipelineConfig;
use semsplat::eval3d;
use semsplat::mapper::run_pipeline;
use semsplat::render::render_frame;
use semsplat::scene::CameraModel;
use semsplat::synth::{demo_room, Codebook, FrameSource, NoiseConfig, SyntheticSource, Trajectory};

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

    // fuse rendered depth + language codes over every third frame
    let camera = source.camera();
    let voxel = 0.10;
    let mut volume = eval3d::TsdfVolume::new(
        Vector3::new(-3.4, -3.4, -0.4),
        voxel,
        [68, 68, 30],
        cfg.codec.code_final,
    );
    for i in (0..frames).step_by(3) {
        let out = render_frame(&result.field, &camera, &result.trajectory[i], cfg.run.mode);
        volume.integrate(&out.depth, &out.feature, cfg.codec.code_final, &camera, &result.trajectory[i])?;
    }
    let mesh = eval3d::marching_cubes(&volume);
    println!(
        "fused mesh: {} vertices, {} triangles",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    eval3d::save_mesh_ply(&mesh, "example_out/fused_mesh.ply".as_ref()).ok();

    // localize each class on the mesh and score against ground-truth
    // surface points sampled from the primitives' depth
    let mut rng = semsplat::rng::stream(5, "emd-example");
    let mut cds = Vec::new();
    let mut emds = Vec::new();
    for name in codebook.names() {
        let query = codebook.query_embedding(name)?;
        let localized = eval3d::localize_query_3d(&mesh, &result.codec, &query, 0.5)?;
        // ground truth: back-project masked depth from a few views
        let mut gt = Vec::new();
        let class = codebook.index_of(name).unwrap() as u16;
        for i in (0..frames).step_by(5) {
            let bundle = source.frame(i)?;
            let mask = source.mask(i)?.unwrap();
            let pose = bundle.pose_gt.unwrap();
            let inv = pose.inverse();
            for y in (0..camera.height).step_by(3) {
                for x in (0..camera.width).step_by(3) {
                    let p = y * camera.width + x;
                    if mask[p] == class && bundle.depth_gt[p] > 0.0 {
                        gt.push(inv.transform(&(camera.ray_dir(x as f64, y as f64) * bundle.depth_gt[p])));
                    }
                }
            }
        }
        if localized.is_empty() || gt.is_empty() {
            println!("{name:8}: no points (localized {}, gt {})", localized.len(), gt.len());
            cds.push(None);
            emds.push(None);
            continue;
        }
        let cd = eval3d::chamfer(&localized, &gt)?;
        let em = eval3d::emd(&localized, &gt, 512, &mut rng)?;
        println!(
            "{name:8}: {} localized vs {} gt points — CD {:.3} m, EMD {:.3} m",
            localized.len(),
            gt.len(),
            cd,
            em
        );
        cds.push(Some(cd));
        emds.push(Some(em));
    }
    let cd_rule = eval3d::apply_failure_rule(&cds)?;
    let emd_rule = eval3d::apply_failure_rule(&emds)?;
    println!(
        "failure rule: CD mean {:?} ({} failures), EMD mean {:?} ({} failures)",
        cd_rule.mean, cd_rule.failures, emd_rule.mean, emd_rule.failures
    );
    Ok(())
}
