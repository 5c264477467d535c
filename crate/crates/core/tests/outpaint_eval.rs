use std::path::Path;

use candle_core::Device;

use sector_outpaint::checkpoint::load_generator;
use sector_outpaint::config::PipelineConfig;
use sector_outpaint::dataset::{make_synthetic_dataset, Manifest, SyntheticConfig};
use sector_outpaint::features::StubFeatureModel;
use sector_outpaint::geometry::BinaryMask;
use sector_outpaint::imageio::{read_gray, write_gray16};
use sector_outpaint::losses::{build_lpips, LpipsConfig};
use sector_outpaint::metrics::{evaluate, write_contact_sheets, MetricReport, PSNR_CAP_DB};
use sector_outpaint::outpaint::{batch_outpaint, BatchOptions, CheckpointedGenerator, OutpaintIndex, INDEX_FILE};
use sector_outpaint::trainer::Trainer;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.resolution = [32, 32];
    cfg.train.batch_size = 2;
    cfg.generator.base_width = 4;
    cfg.discriminator.channels = vec![1, 4, 8, 8, 8];
    cfg
}

/// Dataset + untrained checkpoint + batch run at the given per-side cuts.
fn run(dir: &Path, cuts: &[f64], n_patients: usize) -> (Manifest, OutpaintIndex) {
    let manifest = make_synthetic_dataset(
        &SyntheticConfig {
            n_patients,
            frames_per_patient: 2,
            height: 32,
            width: 32,
            split_fraction: 0.5,
            ..Default::default()
        },
        &dir.join("data"),
    )
    .unwrap();
    let dev = Device::Cpu;
    let trainer = Trainer::new(&small_config(), &dev).unwrap();
    let ckpt = dir.join("g.safetensors");
    trainer.save_checkpoint(&ckpt).unwrap();
    let (generator, _, meta) = load_generator(&ckpt, &dev).unwrap();
    let model = CheckpointedGenerator {
        generator: &generator,
        meta: &meta,
        path: &ckpt,
    };
    let index = batch_outpaint(&manifest, &model, cuts, &dir.join("out"), &BatchOptions::default()).unwrap();
    (manifest, index)
}

fn report(index: &Path) -> MetricReport {
    let dev = Device::Cpu;
    let lpips = build_lpips(&LpipsConfig::default(), &dev).unwrap();
    let features = StubFeatureModel::new(1, &dev).unwrap();
    evaluate(index, &lpips, &features).unwrap()
}

fn codes(path: &Path) -> Vec<u16> {
    read_gray(path).unwrap().iter().map(|v| (v * 65535.0).round() as u16).collect()
}

#[test]
fn quartets_index_and_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, index) = run(dir.path(), &[15.0, 0.0], 6);
    let n_test = manifest.split(sector_outpaint::dataset::Split::Test).count();
    assert!(n_test > 0);
    assert_eq!(index.entries.len(), 2 * n_test);
    assert!(index.failures.is_empty());
    let out = dir.path().join("out");
    assert_eq!(OutpaintIndex::load(&out.join(INDEX_FILE)).unwrap(), index);

    for e in &index.entries {
        for p in [&e.gt, &e.input, &e.output, &e.filled_mask, &e.cone_mask] {
            assert!(out.join(p).is_file(), "{}", p.display());
        }
        let filled = BinaryMask::load_png(&out.join(&e.filled_mask)).unwrap();
        let cone = BinaryMask::load_png(&out.join(&e.cone_mask)).unwrap();
        let input = codes(&out.join(&e.input));
        let output = codes(&out.join(&e.output));
        assert!(filled.is_subset_of(&cone));
        for (k, (f, c)) in filled.view().iter().zip(cone.view().iter()).enumerate() {
            if *c == 1 && *f == 0 {
                assert_eq!(input[k], output[k], "{} pixel {k}", e.frame_id);
            }
        }
        if e.cut_deg == 0.0 {
            assert!(filled.is_empty());
            assert_eq!(input, output);
        } else {
            assert!(!filled.is_empty());
        }
    }

    let rep = report(&out.join(INDEX_FILE));
    assert_eq!(rep.rows.len(), 2);
    assert!(rep.missing.is_empty());
    let zero = &rep.rows[0];
    assert_eq!((zero.cut_deg, zero.mse, zero.psnr), (0.0, 0.0, PSNR_CAP_DB));

    let sheets = write_contact_sheets(&out.join(INDEX_FILE), &dir.path().join("plots"), 4).unwrap();
    assert_eq!(sheets.len(), 2);
    assert!(sheets.iter().all(|p| p.is_file()));
}

fn rewrite_index(out: &Path, f: impl Fn(&mut OutpaintIndex)) -> std::path::PathBuf {
    let mut index = OutpaintIndex::load(&out.join(INDEX_FILE)).unwrap();
    f(&mut index);
    let path = out.join("edited.json");
    index.save(&path).unwrap();
    path
}

fn assert_same_rows(a: &MetricReport, b: &MetricReport) {
    assert_eq!(a.rows, b.rows);
}

#[test]
fn table_shape_perfection_order_and_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, index) = run(dir.path(), &[15.0, 23.0, 30.0, 40.0], 12);
    let out = dir.path().join("out");
    let base = report(&out.join(INDEX_FILE));
    let cuts: Vec<f64> = base.rows.iter().map(|r| r.cut_deg).collect();
    assert_eq!(cuts, vec![30.0, 46.0, 60.0, 80.0]);
    let n_test = index.entries.len() / 4;
    assert!(base.rows.iter().all(|r| r.n_images == n_test));

    // order of the index does not matter
    let reversed = rewrite_index(&out, |ix| ix.entries.reverse());
    assert_same_rows(&base, &report(&reversed));

    // outputs replaced by ground truth
    let perfect = rewrite_index(&out, |ix| ix.entries.iter_mut().for_each(|e| e.output = e.gt.clone()));
    for r in report(&perfect).rows {
        assert_eq!((r.mse, r.l1, r.lpips, r.psnr), (0.0, 0.0, 0.0, PSNR_CAP_DB));
        assert!(r.fid < 1e-3, "fid {}", r.fid);
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }

    // noise growing with the cut
    let noisy = rewrite_index(&out, |ix| {
        for (k, e) in ix.entries.iter_mut().enumerate() {
            let sigma = match e.cut_deg as u32 {
                30 => 0.02,
                46 => 0.08,
                60 => 0.2,
                _ => 0.4,
            };
            let gt = read_gray(&out.join(&e.gt)).unwrap();
            let cone = BinaryMask::load_png(&out.join(&e.cone_mask)).unwrap();
            let mut state = k as u64 * 7919 + 1;
            let noisy = ndarray::Array2::from_shape_fn(gt.dim(), |(i, j)| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let u = (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5;
                if cone.get(i, j) {
                    (gt[[i, j]] + sigma * 2.0 * u).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
            let rel = e.output.with_file_name(format!("{}_noisy.png", e.frame_id.replace('/', "_")));
            write_gray16(&noisy, &out.join(&rel)).unwrap();
            e.output = rel;
        }
    });
    let fids: Vec<f64> = report(&noisy).rows.iter().map(|r| r.fid).collect();
    assert!(fids.windows(2).all(|w| w[0] < w[1]), "{fids:?}");
}

#[test]
fn missing_files_are_listed_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let (_, index) = run(dir.path(), &[15.0], 6);
    let out = dir.path().join("out");
    std::fs::remove_file(out.join(&index.entries[0].output)).unwrap();
    let rep = report(&out.join(INDEX_FILE));
    assert_eq!(rep.missing.len(), 1, "{:?}", rep.missing);
    assert_eq!(rep.rows[0].n_images, index.entries.len() - 1);
}
