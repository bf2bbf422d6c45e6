use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rainseer::datagen::{simulate_storm, Dataset, StormConfig};
use rainseer::geo::{GridGeoref, RadarSequence, RainField, StationSeries, StationSet};
use rainseer::harness::{
    evaluate_model, heatmap_pixels, prepare, pseudo_mask, render_heatmap, run_baseline, train, window_loss, Baseline, Checkpoint, ColorScale,
    FieldModel, RainSeer, TrainConfig, COLORMAP,
};
use rainseer::nn::Ctx;
use rainseer::objective::CSV_HEADER;
use rainseer::{Error, Result};

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.window = 3;
    cfg.model.radar_channels = 2;
    cfg.model.dim = 8;
    cfg.model.boundary_channels = 2;
    cfg.model.virtual_nodes = 4;
    cfg.batch = 1;
    cfg.seed = 3;
    cfg
}

fn toy_storm(seed: u64, steps: usize) -> Dataset {
    let mut s = StormConfig::canonical(seed);
    s.set("size", "8").unwrap();
    s.set("steps", &steps.to_string()).unwrap();
    s.set("gauges", "10").unwrap();
    simulate_storm(&s).unwrap()
}

fn ids(n: usize, tag: &str) -> Vec<String> {
    (0..n).map(|i| format!("{tag}{i}")).collect()
}

fn series(g: &GridGeoref, tag: &str, coords: Vec<(f64, f64)>, steps: usize, f: impl Fn(f64, f64, usize) -> f64) -> StationSeries {
    let n = coords.len();
    let rain = coords.iter().flat_map(|&(x, y)| (0..steps).map(move |t| (x, y, t))).map(|(x, y, t)| f(x, y, t)).collect();
    let stations = StationSet::new(ids(n, tag), coords, vec![false; n], g).unwrap();
    StationSeries::new(stations, steps, rain, vec![true; n * steps]).unwrap()
}

fn flat_radar(g: GridGeoref, steps: usize, dbz: f32) -> RadarSequence {
    RadarSequence::new(vec![dbz; steps * g.cells()], g, (0..steps).map(|t| 10.0 * t as f64).collect()).unwrap()
}

#[test]
fn overfits_a_single_window() {
    let ds = toy_storm(1, 3);
    let mut cfg = toy_config();
    cfg.steps = 200;
    cfg.peak_lr = 1e-2;
    cfg.lambda = 0.0;
    cfg.pseudo_mask = 0.0;
    cfg.weight_decay = 0.0;
    let out = train(&cfg, &ds).unwrap();
    let last = *out.losses.last().unwrap();
    assert!(last < 1e-3, "final training MSE {last}");
}

#[test]
fn identical_configs_give_identical_loss_curves() {
    let ds = toy_storm(2, 6);
    let mut cfg = toy_config();
    cfg.steps = 12;
    cfg.batch = 2;
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    cfg.seed += 1;
    let c = train(&cfg, &ds).unwrap();
    assert_ne!(bits(&a.losses), bits(&c.losses));
}

#[test]
fn no_radar_leaves_radar_parameters_without_gradient() {
    let ds = toy_storm(3, 6);
    let mut cfg = toy_config();
    cfg.ablation.enable("no_radar").unwrap();
    let model = RainSeer::new(cfg.clone(), ds.radar.georef, ds.gauges.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = model.window_at(&ds.radar, &ds.gauges, 4).unwrap();
    let sample = pseudo_mask(&model, w, 0.3, &mut rng).unwrap();
    let mut ctx = Ctx::train(&model.params);
    let loss = window_loss(&model, &mut ctx, &sample, &mut rng).unwrap();
    let grads = ctx.grads(loss.total);
    let mut radar_params = 0;
    for (name, _) in model.params.iter() {
        if name.starts_with("radar.") || name.starts_with("rfe.") || name.starts_with("align.rs.") || name.starts_with("align.sr.") {
            radar_params += 1;
            if let Some(g) = grads.get(name) {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name} has a gradient");
            }
        }
    }
    assert!(radar_params > 0);
    assert!(grads.iter().any(|(n, g)| n.starts_with("aws.") && g.data().iter().any(|&v| v != 0.0)));

    cfg.steps = 5;
    let out = train(&cfg, &ds).unwrap();
    for (name, t) in model.params.iter().filter(|(n, _)| n.starts_with("radar.")) {
        assert_eq!(out.checkpoint.model.params.get(name).unwrap(), t, "{name} moved");
    }
}

/// Puts the held-out readings into their own cells and `fill` elsewhere.
struct OracleStub {
    held_out: StationSeries,
    fill: Option<f64>,
}

impl FieldModel for OracleStub {
    fn name(&self) -> String {
        "stub".into()
    }

    fn field_at(&self, radar: &RadarSequence, _gauges: &StationSeries, t: usize) -> Result<(RainField, Vec<String>)> {
        let g = radar.georef;
        let mut values = vec![0.0; g.cells()];
        for i in 0..self.held_out.len() {
            let (x, y) = self.held_out.stations.coords[i];
            let (r, c) = g.cell_of(x, y)?;
            values[r * g.width + c] = self.fill.unwrap_or(self.held_out.value(i, t));
        }
        Ok((RainField::new(values, g)?, Vec::new()))
    }
}

#[test]
fn evaluate_with_oracle_and_mean_stubs() {
    let ds = simulate_storm(&StormConfig::canonical(4)).unwrap();
    let ex = prepare(&ds, 0.2, 0.8, 4).unwrap();
    let truth = OracleStub {
        held_out: ex.held_out.clone(),
        fill: None,
    };
    let r = evaluate_model(&truth, &ex.input, &ex.held_out, ex.test_steps.clone()).unwrap();
    assert_eq!((r.rmse, r.mae, r.nse), (0.0, 0.0, 1.0));
    assert!((r.cc - 1.0).abs() < 1e-12);

    let mut vals = Vec::new();
    for t in ex.test_steps.clone() {
        for i in 0..ex.held_out.len() {
            if ex.held_out.observed(i, t) {
                vals.push(ex.held_out.value(i, t));
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let stub = OracleStub {
        held_out: ex.held_out.clone(),
        fill: Some(mean),
    };
    let r = evaluate_model(&stub, &ex.input, &ex.held_out, ex.test_steps.clone()).unwrap();
    assert!(r.nse.abs() < 1e-9, "nse {}", r.nse);

    assert!(matches!(
        evaluate_model(&stub, &ex.input, &ex.held_out, 5..5),
        Err(Error::Domain(_))
    ));
}

#[test]
fn model_and_baseline_reports_share_the_csv_header() {
    let ds = toy_storm(5, 10);
    let mut cfg = toy_config();
    cfg.steps = 3;
    let ex = prepare(&ds, 0.2, 0.8, cfg.seed).unwrap();
    let out = train(&cfg, &ex.train).unwrap();
    let model = rainseer::harness::evaluate(&out.checkpoint, &ex.input, &ex.held_out).unwrap();
    let base = run_baseline("idw", &ex.input, &ex.held_out, 0.8).unwrap();
    let a = rainseer::objective::MetricsReport::to_csv(&[model]);
    let b = rainseer::objective::MetricsReport::to_csv(&[base]);
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(a.lines().next(), Some(CSV_HEADER));
}

#[test]
fn zr_is_exact_on_undistorted_data() {
    let ds = simulate_storm(&StormConfig::undistorted(6)).unwrap();
    let ex = prepare(&ds, 0.2, 0.8, 6).unwrap();
    let r = run_baseline("zr", &ex.input, &ex.held_out, 0.8).unwrap();
    assert!(r.rmse < 1e-6, "rmse {}", r.rmse);
}

#[test]
fn tin_reproduces_affine_truth_inside_the_hull() {
    let g = GridGeoref::new(0.0, 0.0, 32.0, 32.0, 16, 16).unwrap();
    let steps = 10;
    let truth = |x: f64, y: f64, t: usize| (1.0 + t as f64) * (2.0 + 0.3 * x + 0.1 * y);
    let mut visible = vec![g.cell_center(0, 0), g.cell_center(0, 15), g.cell_center(15, 0), g.cell_center(15, 15)];
    for k in 0..12 {
        visible.push(g.cell_center((k * 5 + 2) % 16, (k * 7 + 3) % 16));
    }
    visible.sort_by(|a, b| a.partial_cmp(b).unwrap());
    visible.dedup();
    let held: Vec<(f64, f64)> = [(4, 9), (8, 8), (11, 5), (6, 2)].iter().map(|&(r, c)| g.cell_center(r, c)).collect();
    let data = Dataset::new(flat_radar(g, steps, 20.0), series(&g, "v", visible, steps, truth), None).unwrap();
    let held_out = series(&g, "h", held, steps, truth);
    let r = run_baseline("tin", &data, &held_out, 0.8).unwrap();
    assert!(r.nse > 0.99, "nse {}", r.nse);
}

#[test]
fn idw_and_tin_agree_where_held_out_and_visible_coincide() {
    let g = GridGeoref::new(0.0, 0.0, 32.0, 32.0, 16, 16).unwrap();
    let steps = 3;
    let value = |x: f64, y: f64, t: usize| ((x * 0.37 + y * 0.11 + t as f64).sin() + 1.5) * 4.0;
    let visible: Vec<(f64, f64)> = [(1, 1), (3, 12), (9, 4), (14, 14), (7, 7), (12, 2)].iter().map(|&(r, c)| g.cell_center(r, c)).collect();
    let held = vec![visible[2], visible[4]];
    let data = Dataset::new(flat_radar(g, steps, 10.0), series(&g, "v", visible, steps, value), None).unwrap();
    let held_out = series(&g, "h", held.clone(), steps, value);
    let (idw, _) = Baseline::parse("idw").unwrap().field_at(&data.radar, &data.gauges, 1).unwrap();
    let (tin, _) = Baseline::parse("tin").unwrap().field_at(&data.radar, &data.gauges, 1).unwrap();
    for (i, &(x, y)) in held.iter().enumerate() {
        let a = idw.sample(x, y).unwrap();
        assert_eq!(a, tin.sample(x, y).unwrap());
        assert_eq!(a, held_out.value(i, 1));
    }
}

#[test]
fn unknown_baseline_lists_the_methods() {
    let ds = toy_storm(7, 10);
    let ex = prepare(&ds, 0.2, 0.8, 0).unwrap();
    match run_baseline("kriging", &ex.input, &ex.held_out, 0.8) {
        Err(Error::Usage(msg)) => {
            for m in ["zr", "tin", "tps", "idw"] {
                assert!(msg.contains(m), "{msg}");
            }
        }
        other => panic!("expected a usage error, got {other:?}"),
    }
}

#[test]
fn heatmap_contract() {
    let g = GridGeoref::new(0.0, 0.0, 10.0, 6.0, 3, 5).unwrap();
    let flat = RainField::new(vec![7.5; 15], g).unwrap();
    let scale = ColorScale { max: 20.0, pixel: 4 };
    let (w, h, px) = heatmap_pixels(&flat, &[], scale).unwrap();
    assert_eq!((w, h), (20, 12));
    assert!(px.chunks(3).all(|c| c == &px[..3]));

    let field = RainField::from_fn(g, |x, y| x + y);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    render_heatmap(&field, &[(3.0, 3.0)], &a, scale).unwrap();
    render_heatmap(&field, &[(3.0, 3.0)], &b, scale).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let dec = png::Decoder::new(std::fs::File::open(&a).unwrap());
    let reader = dec.read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (20, 12));

    let zero = RainField::new(vec![0.0; 15], g).unwrap();
    let (_, _, px) = heatmap_pixels(&zero, &[], scale).unwrap();
    assert!(px.chunks(3).all(|c| c == COLORMAP[0]));
    assert!(matches!(
        render_heatmap(&field, &[], tmp.path().join("missing/dir/x.png"), scale),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let ds = toy_storm(8, 6);
    let mut cfg = toy_config();
    cfg.steps = 4;
    cfg.ablation.enable("no_bpa_bidir").unwrap();
    let out = train(&cfg, &ds).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, out.checkpoint.model);
    assert_eq!(back.step, 4);
    assert_eq!(back.seed(), cfg.seed);
    let a = out.checkpoint.model.reconstruct(&ds.radar, &ds.gauges, 5).unwrap();
    let b = back.model.reconstruct(&ds.radar, &ds.gauges, 5).unwrap();
    let bits = |f: &RainField| f.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
