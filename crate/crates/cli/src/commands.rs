use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sonospeck::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use sonospeck::config::RunConfig;
use sonospeck::evalkit::{self, EvalRow};
use sonospeck::io::{self, BitDepth, MANIFEST_FILE};
use sonospeck::rpn::{self, RpnParams};
use sonospeck::tensor::gradcheck;
use sonospeck::training::{self, EpochEvent, SweepResult, METRICS_HEADER};
use sonospeck::Tensor;

use crate::error::{file_err, CliError};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Where the effective configuration of a run is saved.
pub const CONFIG_ECHO: &str = "config.txt";

/// Prints the effective configuration and saves it next to the outputs.
pub fn echo_config(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    let text = cfg.render();
    eprintln!("# effective configuration\n{text}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(file_err(dir.display().to_string()))?;
        let p = dir.join(CONFIG_ECHO);
        fs::write(&p, text).map_err(file_err(p.display().to_string()))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir.display().to_string()))?;
    }
    fs::write(path, text).map_err(file_err(path.display().to_string()))
}

/// `1234567` → `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_output()?;
    echo_config(cfg, Some(out))?;
    let records = io::simulate(out, &cfg.simulate_config())?;
    println!("wrote {} scene pairs and {} to {}", records.len(), MANIFEST_FILE, out.display());
    Ok(())
}

fn noisy_images(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    Ok(io::load_corpus(dir)?.into_iter().map(|item| item.noisy).collect())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let corpus_dir = cfg.require_corpus()?;
    let out = cfg.require_output()?;
    echo_config(cfg, Some(out))?;
    let corpus = noisy_images(corpus_dir)?;
    let validation = match &cfg.validation {
        Some(dir) => noisy_images(dir)?,
        None => Vec::new(),
    };
    eprintln!("training on {} images ({} held out)", corpus.len(), validation.len());
    eprintln!("{METRICS_HEADER}");
    let mut progress = |ev: &EpochEvent<'_>| {
        eprintln!("{}", ev.record.csv_row());
        Ok(())
    };
    match training::train_to_dir(out, &corpus, &validation, &cfg.train, &cfg.loss, cfg.speckle, &mut progress) {
        Ok(outcome) => {
            let last = outcome.log.last().expect("log holds the initial row");
            println!(
                "finished {} epochs: total loss {:.6}, Var(r) {:.4} (target {:.4}); checkpoint {}",
                last.epoch,
                last.total,
                last.var_r,
                cfg.speckle.sigma2_tgt,
                out.join("final.ckpt").display()
            );
            Ok(())
        }
        Err(e) => {
            if training::is_non_finite(&e) {
                eprintln!("training aborted; last good state saved to {}", out.join("last_good.ckpt").display());
            }
            Err(e.into())
        }
    }
}

/// An image to process: intensity values plus the factor its file was stored with.
struct Item {
    id: String,
    image: Tensor<f32>,
    clean: Option<Tensor<f32>>,
    scale: f64,
    looks: Option<f64>,
}

/// Reads a single image, an image directory, or a simulated corpus (through
/// its manifest, which also provides clean references and storage scales).
fn load_items(path: &Path, input_scale: f64) -> Result<Vec<Item>> {
    let inv = |t: Tensor<f32>, s: f64| t.map(|v| v / s as f32);
    if path.is_file() {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![Item { id, image: inv(io::load_image(path)?, input_scale), clean: None, scale: input_scale, looks: None }]);
    }
    let manifest = path.join(MANIFEST_FILE);
    if manifest.exists() {
        let records = io::read_manifest(&manifest)?;
        let corpus = io::load_corpus(path)?;
        return Ok(records
            .into_iter()
            .zip(corpus)
            .map(|(r, c)| Item { id: c.id, image: c.noisy, clean: c.clean, scale: r.intensity_scale, looks: Some(r.looks) })
            .collect());
    }
    let files = io::list_images(path)?;
    if files.is_empty() {
        return Err(io::IoError::EmptyCorpus(path.to_path_buf()).into());
    }
    files.iter().map(|p| load_items(p, input_scale).map(|mut v| v.remove(0))).collect()
}

/// `dir/{id}.png` or `dir/{id}.pgm`.
fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Invalid(format!("no image '{id}' (.png or .pgm) in {}", dir.display())))
}

pub fn denoise(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = cfg.require_checkpoint()?;
    let input = cfg.require_input()?;
    let out = cfg.require_output()?;
    echo_config(cfg, Some(out))?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let items = load_items(input, cfg.input_scale)?;
    let eps = ckpt.loss.eps;
    let rows = items
        .par_iter()
        .map(|item| -> Result<String> {
            let d = rpn::despeckle(&ckpt.params, &item.image, eps)?;
            let s = item.scale as f32;
            io::save_image(out.join(format!("{}.png", item.id)), &d.x_hat.map(|v| v * s), BitDepth::Sixteen)?;
            Ok(format!("{},{},{}", item.id, d.r.mean(), d.r.variance()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("image_id,r_mean,r_var\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_file(&out.join("r_stats.csv"), &csv)?;
    print!("{csv}");
    eprintln!("target Var(r) = {:.4}; wrote {} images to {}", ckpt.speckle.sigma2_tgt, rows.len(), out.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let noisy = cfg.require_noisy()?;
    let denoised = cfg.require_denoised()?;
    echo_config(cfg, cfg.output.as_deref())?;
    let items = load_items(noisy, cfg.input_scale)?;
    let rows = items
        .par_iter()
        .map(|item| -> Result<EvalRow> {
            let den = io::load_image(find_image(denoised, &item.id)?)?.map(|v| v / item.scale as f32);
            let clean = match &cfg.clean {
                Some(dir) => Some(io::load_image(find_image(dir, &item.id)?)?.map(|v| v / item.scale as f32)),
                None => item.clean.clone(),
            };
            let looks = cfg.train.mscore_looks.or(item.looks).unwrap_or(cfg.speckle.looks);
            Ok(evalkit::evaluate_pair(&item.id, &item.image, &den, clean.as_ref(), looks, &cfg.train.mscore)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = evalkit::eval_csv(&rows);
    if let Some(out) = &cfg.output {
        write_file(&out.join("evaluation.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn report_sweep(cfg: &RunConfig, result: &SweepResult, column: &str, file: &str) -> Result<()> {
    let csv = result.csv(column);
    if let Some(out) = &cfg.output {
        write_file(&out.join(file), &csv)?;
    }
    print!("{csv}");
    let best = result.best_row();
    eprintln!(
        "selected {column} = {} (sigma2_tgt {:.4}, M {:.3}, scored against {:.2} looks)",
        best.value, best.sigma2_tgt, best.m_value, result.nominal_looks
    );
    Ok(())
}

pub fn sweep_variance(cfg: &RunConfig) -> Result<()> {
    let corpus = noisy_images(cfg.require_corpus()?)?;
    echo_config(cfg, cfg.output.as_deref())?;
    let mut progress = |row: &training::SweepRow| eprintln!("looks {} -> M {:.3} ({} blocks)", row.value, row.m_value, row.n_selected);
    let result = training::select_target_variance(&corpus, &cfg.train, &cfg.loss, &cfg.sweep, &mut progress)?;
    report_sweep(cfg, &result, "looks", "sweep_variance.csv")
}

pub fn sweep_lambda(cfg: &RunConfig) -> Result<()> {
    let corpus = noisy_images(cfg.require_corpus()?)?;
    echo_config(cfg, cfg.output.as_deref())?;
    let mut progress = |row: &training::SweepRow| eprintln!("lambda {} -> M {:.3} ({} blocks)", row.value, row.m_value, row.n_selected);
    let result =
        training::sweep_lambda(&corpus, &cfg.train, &cfg.loss, cfg.speckle, &cfg.lambda_grid, &cfg.sweep, &mut progress)?;
    report_sweep(cfg, &result, "lambda", "sweep_lambda.csv")
}

/// Random instances per op in the gradient suite.
const GRADCHECK_INSTANCES: usize = 20;
const OP_TOLERANCE: f64 = 1e-4;
const NETWORK_TOLERANCE: f64 = 1e-3;
const NETWORK_ENTRIES: usize = 8;

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.train.seed;
    let mut reports = gradcheck::op_suite(seed, GRADCHECK_INSTANCES, OP_TOLERANCE)?;
    reports.push(rpn::network_gradcheck(seed, NETWORK_ENTRIES, NETWORK_TOLERANCE)?);
    let mut failed = Vec::new();
    println!("{:<22} {:>12} {:>10} {:>8}  result", "check", "max_rel_err", "tolerance", "entries");
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<22} {:>12.3e} {:>10.0e} {:>8}  {verdict}", r.name, r.max_rel_err, r.tolerance, r.entries_checked);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let params: RpnParams<f32> = match &cfg.checkpoint {
        Some(p) => Checkpoint::load(p)?.params,
        None => rpn::build_rpn(cfg.train.seed),
    };
    let report = evalkit::bench_throughput(&params, cfg.bench_size, cfg.bench_size, cfg.bench_iterations)?;
    println!("{report}");
    Ok(())
}

pub fn info(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require_checkpoint()?;
    let ckpt = Checkpoint::load(path)?;
    let magic = String::from_utf8_lossy(MAGIC);
    println!("checkpoint   {}", path.display());
    println!("format       {magic} (version {})", FORMAT_VERSION as char);
    println!("epoch        {}", ckpt.epoch);
    println!("parameters   {}", thousands(ckpt.params.param_count()));
    println!("tensors      {}", ckpt.params.tensors().len());
    for (name, t) in ckpt.params.named() {
        let s = t.shape();
        println!("  {name:<26} [{}, {}, {}, {}]", s.n, s.c, s.h, s.w);
    }
    println!("target       {} looks, sigma2_tgt {}", ckpt.speckle.looks, ckpt.speckle.sigma2_tgt);
    let l = &ckpt.loss;
    println!(
        "loss         beta0 {} over {} epochs, gamma {}, lambda {}, sigma_edge {}, median {}x{}, eps {}, {} scope",
        l.beta0, l.horizon, l.gamma, l.lambda, l.sigma_edge, l.median_window, l.median_window, l.eps, l.stat_scope
    );
    match &ckpt.optimizer {
        Some(state) => println!("optimizer    AdamW state after {} steps", state.step),
        None => println!("optimizer    none"),
    }
    println!("MACs @160²   {}", thousands(rpn::macs(160, 160) as usize));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(160_417), "160,417");
        assert_eq!(thousands(4_059_955_200), "4,059,955,200");
    }
}
