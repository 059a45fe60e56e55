use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use asrl::config::{RunConfig, DEFAULT_DUPLICATE_TAU};
use asrl::datapipe::{bicubic_upsample_4x, Batch, ImageDataset, LoadOptions};
use asrl::evalkit::{emit_curves, emit_grid, evaluate, render_panels, run_toy_w1, spearman, ToyW1Config, W1Row};
use asrl::trainer::{generate, parse_csv, Checkpoint, Trainer, CSV_HEADER};
use asrl::{Error, Result, Tensor};
use serde::Serialize;

/// Columns in evaluation grids.
const GRID_COLUMNS: usize = 8;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Rows: low-resolution input, bicubic baseline, label, generated.
fn comparison_grid(batch: &Batch, generated: &Tensor, path: &Path) -> Result<()> {
    let bicubic = bicubic_upsample_4x(&batch.inputs)?;
    emit_grid(&[&batch.inputs, &bicubic, &batch.labels, generated], path)
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    create_dir(out)?;
    write_file(&out.join("resolved_config.json"), cfg.to_json() + "\n")?;

    let dataset = ImageDataset::load(&cfg.data.source, &cfg.load_options())?;
    let mut trainer = Trainer::new(cfg.train_config(), dataset)?;
    let preview = trainer.dataset().head(cfg.eval.samples)?;
    let ckpt_dir = out.join("checkpoints");
    let sample_dir = out.join("samples");
    if cfg.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    create_dir(&sample_dir)?;

    let log_path = out.join("log.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{CSV_HEADER}").map_err(io_err(&log_path))?;
    let (ckpt_every, grid_every) = (cfg.train.checkpoint_every, cfg.train.grid_every);
    let result = trainer.run(
        |rec| writeln!(log, "{}", rec.csv_line()).map_err(io_err(&log_path)),
        |t| {
            let g = t.g_iter();
            if ckpt_every > 0 && g % ckpt_every == 0 {
                t.save_checkpoint(&ckpt_dir.join(format!("g{g:06}.ckpt")))?;
            }
            if grid_every > 0 && g % grid_every == 0 {
                comparison_grid(&preview, &t.generate(&preview)?, &sample_dir.join(format!("g{g:06}.png")))?;
            }
            Ok(())
        },
    );
    log.flush().map_err(io_err(&log_path))?;
    result?;

    trainer.save_checkpoint(&out.join("final.ckpt"))?;
    comparison_grid(&preview, &trainer.generate(&preview)?, &sample_dir.join("final.png"))?;
    let last = trainer.last_values();
    println!(
        "trained {} generator iterations: j_d={:.6} j_g={:.6} l1={:.6}",
        trainer.g_iter(),
        last.j_d,
        last.j_g,
        last.l1
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &str, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.train_config()?;
    let generator = ckpt.generator()?;
    let label_size = cfg.generator.image_size;
    let opts = LoadOptions { label_size, crop_size: 2 * label_size, seed: cfg.seed };
    let dataset = ImageDataset::load(data, &opts)?;
    let batch = dataset.head(dataset.len())?;
    let generated = generate(&generator, &batch, cfg.seed)?;
    let report = evaluate(&batch, &generated, DEFAULT_DUPLICATE_TAU)?;

    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_file(&out.join("report.json"), json + "\n")?;
    let shown: Vec<usize> = (0..batch.len().min(GRID_COLUMNS)).collect();
    let head = dataset.gather(&shown)?;
    comparison_grid(&head, &generate(&generator, &head, cfg.seed)?, &out.join("grid.png"))?;
    println!(
        "{} images: l1={:.6} psnr_db={:.3} bicubic_l1={:.6}",
        batch.len(),
        report.l1,
        report.psnr_db.0,
        report.bicubic_l1
    );
    Ok(())
}

#[derive(Serialize)]
struct W1Table<'a> {
    w1_table: &'a [W1Row],
    spearman: f64,
}

pub fn toyw1(out: &Path) -> Result<()> {
    let cfg = ToyW1Config::default();
    let rows = run_toy_w1(&cfg)?;
    let truth: Vec<f64> = rows.iter().map(|r| r.true_w1).collect();
    let estimate: Vec<f64> = rows.iter().map(|r| r.critic_estimate).collect();
    let rho = spearman(&truth, &estimate)?;

    create_dir(out)?;
    let json = serde_json::to_string_pretty(&W1Table { w1_table: &rows, spearman: rho })?;
    write_file(&out.join("w1_table.json"), json + "\n")?;
    let shifts: Vec<f64> = rows.iter().map(|r| r.shift).collect();
    let svg = render_panels(&shifts, &[("true_w1", truth), ("critic_estimate", estimate)]);
    write_file(&out.join("w1.svg"), svg)?;

    println!("shift  true_w1  critic_estimate");
    for r in &rows {
        println!("{:5.2}  {:7.4}  {:15.4}", r.shift, r.true_w1, r.critic_estimate);
    }
    println!("spearman {rho}");
    Ok(())
}

pub fn plot(log: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(log).map_err(io_err(log))?;
    let records = parse_csv(&text)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    emit_curves(&records, out)
}
