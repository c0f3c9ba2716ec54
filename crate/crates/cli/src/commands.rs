use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pnen::gradcheck::{end_to_end, end_to_end_config, per_op_suite};
use pnen::io::{load_checkpoint, read_image, write_image};
use pnen::layers::{Module, NormMode};
use pnen::metrics::{bench_variants, format_psnr, psnr, ssim, SsimParams};
use pnen::model::{pnen_forward, NonLocalKind, PnenModel};
use pnen::nonlocal::{dump_attention, NonLocal};
use pnen::train::{synth_textures, train as run_training, Artifacts, TextureSpec};
use pnen::{Shape, Tensor};

use crate::config;
use crate::error::CliError;
use crate::ConfigArgs;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(pnen::Error::Io { path: path.display().to_string(), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

/// A single image file, or every `.pgm`/`.ppm` in a directory in name order.
fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(pnen::Error::Data(format!("no .pgm or .ppm images in {}", path.display())).into());
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_model(path: &Path) -> Result<PnenModel<f32>> {
    let mut model: PnenModel<f32> = load_checkpoint(path)?;
    model.set_norm_mode(NormMode::Eval);
    Ok(model)
}

fn run_model(model: &PnenModel<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (y, _) = pnen_forward(x, model)?;
    y.check_finite("network output")?;
    Ok(y)
}

pub fn train(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let (pairs, cfg) = config::load(args.config.as_deref(), &args.overrides)?;
    let out = out.unwrap_or(cfg.out_dir);
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &pairs.to_text())?;
    let outcome = run_training::<f32>(&cfg.train, &Artifacts::in_dir(&out))?;
    if let Some(last) = outcome.log.last() {
        println!("steps {} epoch {} lr {} loss {}", last.step, last.epoch, last.lr, last.loss);
    }
    println!("wrote {}", out.join("final.txt").display());
    Ok(())
}

/// Worker count for `infer`, from `PNB_THREADS` (default 1).
fn thread_cap() -> Result<usize> {
    match std::env::var("PNB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("PNB_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let threads = thread_cap()?;
    let model = load_model(checkpoint)?;
    let files = image_files(input)?;
    create_dir(out)?;
    let one = |f: &PathBuf| -> Result<()> {
        let x = read_image::<f32>(f)?;
        let y = run_model(&model, &x)?;
        write_image(out.join(file_name(f)), &y)?;
        Ok(())
    };
    let workers = threads.min(files.len());
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|t| {
                let (files, one) = (&files, &one);
                s.spawn(move || files.iter().skip(t).step_by(workers).try_for_each(one))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    results.into_iter().collect::<Result<()>>()?;
    println!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub config: &'a ConfigArgs,
    pub input: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub pred: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn eval(a: EvalArgs<'_>) -> Result<()> {
    let (_, cfg) = config::load(a.config.config.as_deref(), &a.config.overrides)?;
    let listing = a
        .input
        .or(a.reference)
        .ok_or_else(|| CliError::Usage("eval needs --input or --reference".into()))?;
    let model = a.checkpoint.map(load_model).transpose()?;
    if model.is_none() && a.pred.is_none() {
        return Err(CliError::Usage("eval needs --checkpoint or --pred".into()));
    }
    if model.is_some() && a.input.is_none() {
        return Err(CliError::Usage("--checkpoint needs --input".into()));
    }

    let mut csv = String::from("image,psnr,ssim\n");
    let (mut sum_psnr, mut sum_ssim, mut count) = (0.0, 0.0, 0usize);
    for file in image_files(listing)? {
        let name = file_name(&file);
        let source = a.input.map(|d| read_image::<f32>(d.join(&name))).transpose()?;
        let target = match (a.reference, &source) {
            (Some(dir), _) => read_image::<f32>(dir.join(&name))?,
            (None, Some(x)) => cfg.train.filter.apply(x)?,
            (None, None) => unreachable!("listing requires input or reference"),
        };
        let pred = match (&model, a.pred) {
            (Some(m), _) => run_model(m, source.as_ref().expect("checked above"))?,
            (None, Some(dir)) => read_image::<f32>(dir.join(&name))?,
            (None, None) => unreachable!("checked above"),
        };
        let p = psnr(&pred, &target, 1.0)?;
        let s = ssim(&pred, &target, SsimParams::default())?;
        let _ = writeln!(csv, "{name},{},{s:.6}", format_psnr(p));
        sum_psnr += p;
        sum_ssim += s;
        count += 1;
    }
    match a.out {
        Some(path) => {
            write_text(path, &csv)?;
            let n = count as f64;
            println!("{count} images, mean psnr {} ssim {:.6}", format_psnr(sum_psnr / n), sum_ssim / n);
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn bench(args: &ConfigArgs, size: usize, dtype_bytes: usize, csv_dir: Option<&Path>) -> Result<()> {
    let (_, cfg) = config::load(args.config.as_deref(), &args.overrides)?;
    let model = &cfg.train.model;
    let reports = bench_variants(model, Shape::new(1, model.c, size, size), dtype_bytes)?;
    if let Some(dir) = csv_dir {
        create_dir(dir)?;
    }
    let mut summary = format!(
        "{:<8} {:>16} {:>18} {:>16} {:>16} {:>10} {:>14}\n",
        "variant", "attention_macs", "attention_elements", "attention_memory", "flops", "params", "peak_bytes"
    );
    for (kind, r) in NonLocalKind::ALL.iter().zip(&reports) {
        println!("== {} ==", kind.name());
        print!("{}", r.to_text());
        println!();
        if let Some(dir) = csv_dir {
            write_text(&dir.join(format!("bench-{}.csv", kind.name())), &r.to_csv())?;
        }
        let _ = writeln!(
            summary,
            "{:<8} {:>16} {:>18} {:>16} {:>16} {:>10} {:>14}",
            kind.name(),
            r.attention_macs(),
            r.attention_elements(),
            r.attention_memory(),
            r.total_flops(),
            r.total_params(),
            r.peak_bytes(pnen::metrics::MemoryMode::Inference)
        );
    }
    print!("{summary}");
    let get = |k: NonLocalKind| &reports[NonLocalKind::ALL.iter().position(|&x| x == k).expect("variant")];
    let (nlb, pnb) = (get(NonLocalKind::Nlb), get(NonLocalKind::Pnb));
    println!("pnb/nlb attention_elements ratio {}", pnb.attention_elements() as f64 / nlb.attention_elements() as f64);
    println!("pnb/nlb attention_memory ratio {:.4}", pnb.attention_memory() as f64 / nlb.attention_memory() as f64);
    Ok(())
}

pub fn gradcheck(seed: u64, skip_end_to_end: bool) -> Result<()> {
    let mut results = per_op_suite(seed)?;
    if !skip_end_to_end {
        results.push(end_to_end(end_to_end_config(), seed)?);
    }
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--pixel expects `y,x`, got `{s}`"));
    let (y, x) = s.split_once(',').ok_or_else(bad)?;
    Ok((y.trim().parse().map_err(|_| bad())?, x.trim().parse().map_err(|_| bad())?))
}

pub fn dump_attn(args: &ConfigArgs, checkpoint: Option<&Path>, image: &Path, pixel: &str, group: usize, out: &Path) -> Result<()> {
    let pixel = parse_pixel(pixel)?;
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let (_, cfg) = config::load(args.config.as_deref(), &args.overrides)?;
            let mut m = PnenModel::new(cfg.train.model, cfg.train.seed)?;
            m.set_norm_mode(NormMode::Eval);
            m
        }
    };
    let block = match model.groups.get(group).map(|g| &g.attention) {
        Some(NonLocal::Pnb(b)) => b,
        Some(_) => return Err(CliError::Usage(format!("group {group} does not use a pyramid non-local block"))),
        None => return Err(CliError::Usage(format!("group {group} out of range (model has {})", model.groups.len()))),
    };
    let x = read_image::<f32>(image)?;
    let features = model.attention_input(&x, group)?;
    let dumps = dump_attention(&features, block, pixel)?;
    create_dir(out)?;
    for d in &dumps {
        let stem = format!("g{group}-s{}", d.scale);
        let t = d.as_tensor();
        let (lo, hi) = t.min_max();
        let span = hi - lo;
        let scaled = t.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        write_image(out.join(format!("{stem}.pgm")), &scaled)?;
        let mut text = format!(
            "# scale {} stride {} pixel {} {} grid {}x{} min {lo} max {hi}\n",
            d.scale, d.stride, d.pixel.0, d.pixel.1, d.height, d.width
        );
        for row in d.weights.chunks(d.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        write_text(&out.join(format!("{stem}.txt")), &text)?;
        println!("scale {} stride {}: {}x{} map -> {}", d.scale, d.stride, d.height, d.width, out.join(format!("{stem}.pgm")).display());
    }
    Ok(())
}

pub fn synth_data(out: &Path, spec: TextureSpec) -> Result<()> {
    if !(spec.channels == 1 || spec.channels == 3) {
        return Err(CliError::Usage(format!("--channels must be 1 or 3, got {}", spec.channels)));
    }
    let images = synth_textures::<f32>(&spec).map_err(|e| match e {
        pnen::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    create_dir(out)?;
    let ext = if spec.channels == 1 { "pgm" } else { "ppm" };
    for (i, img) in images.iter().enumerate() {
        write_image(out.join(format!("synth-{i:03}.{ext}")), img)?;
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}
