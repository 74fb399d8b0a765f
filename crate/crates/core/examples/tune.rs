//! Scratch harness for sizing the synthetic benchmark (not shipped).

use stpark_core::data::*;
use stpark_core::model::{ModelConfig, ModelParams};
use stpark_core::tensor::Tensor;
use stpark_core::train::*;

fn main() {
    let (frame, temporal, lots) = synth_generate(20, 30, 7).unwrap();
    println!("frame: {} steps x {} lots", frame.n_steps(), frame.n_lots());

    let filtered = filter_lots(&frame, 0.30, 0.5).unwrap();
    println!("lots surviving filter: {}", filtered.n_lots());
    let (train_end, val_end) = split_boundaries(frame.n_steps(), (10, 1, 1));
    for lot in 0..frame.n_lots() {
        let collect = |r: std::ops::Range<usize>| -> Vec<f64> {
            r.map(|t| frame.value(t, lot)).collect()
        };
        let kl = histogram_kl(&collect(0..train_end), &collect(val_end..frame.n_steps()));
        if kl > 0.3 {
            println!("  lot {lot}: kl = {kl:.3}");
        }
    }

    let imputed = impute_missing(&filtered);
    let bundle = split_and_window(&imputed, &temporal, &lots, 12, 12, (10, 1, 1)).unwrap();
    println!(
        "windows: train {} val {} test {}",
        bundle.train.n_windows, bundle.val.n_windows, bundle.test.n_windows
    );

    let target = denormalized_targets(&bundle.test, &bundle.stats);

    let ha = HaBaseline::fit(&bundle).unwrap();
    let ha_pred = ha.predict_windows(&bundle, &bundle.test);
    let ha_mae = masked_mae(&ha_pred, &target, &bundle.test.y_mask);
    println!("HA test MAE: {ha_mae:.4}");

    let n = bundle.lot_ids.len();
    let train_series = &bundle.series[..bundle.boundaries.0 * n];
    let var = VarBaseline::fit(train_series, n, 4, 1e-6).unwrap();
    let var_pred = var.predict_windows(&bundle, &bundle.test).unwrap();
    let var_mae = masked_mae(&var_pred, &target, &bundle.test.y_mask);
    println!("VAR(4) test MAE: {var_mae:.4}");

    // small model training run
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let hidden: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let mut mcfg = ModelConfig::new(n, TEMPORAL_FEATURE_DIM, SPATIAL_FEATURE_DIM);
    mcfg.hidden_pa = hidden;
    mcfg.spatial_hidden = hidden / 2;
    mcfg.n_heads = 4;
    let mut tcfg = TrainConfig::new(epochs, 7);
    tcfg.batch_size = 16;
    let params = ModelParams::init(&mcfg, tcfg.seed).unwrap();
    println!("model params: {}", params.param_count());

    let started = std::time::Instant::now();
    let out = train(&mcfg, &tcfg, &bundle, None).unwrap();
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    for log in &out.logs {
        println!(
            "  epoch {:2}  train {:.4}  val {:.4}  lr {:.5}  {:.1}s",
            log.epoch, log.train_mae, log.val_mae, log.lr, log.seconds
        );
    }

    let f_s = Tensor::from_vec(vec![n, SPATIAL_FEATURE_DIM], bundle.f_s.clone()).unwrap();
    let mut pred = predict_split(&mcfg, &out.params, &bundle.test, &f_s, 32).unwrap();
    denormalize_predictions(&mut pred, &bundle.stats, n);
    let model_mae = masked_mae(&pred, &target, &bundle.test.y_mask);
    println!(
        "model test MAE: {model_mae:.4}  (vs 0.8*HA = {:.4}, 1.0*VAR = {:.4})",
        0.8 * ha_mae,
        var_mae
    );
}
