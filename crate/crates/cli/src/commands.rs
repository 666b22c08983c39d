use std::fs;
use std::path::{Path, PathBuf};

use hide_core::analysis::{entropy_map, save_matrix, scale_to_u8, utilization_report};
use hide_core::checkpoint;
use hide_core::codec::{self, CompressedImage};
use hide_core::config::{Config, LAMBDAS};
use hide_core::corpus::Corpus;
use hide_core::image::Image;
use hide_core::metrics::{self, bd_rate_records, format_db, psnr};
use hide_core::sweep::{sweep_point, SweepEvent};
use hide_core::train::Trainer;
use hide_core::{DType, Error, Model, ModelConfig, Real, Variant};

use crate::{AnalyzeArgs, BdrateArgs, DecodeArgs, EncodeArgs, ModelOverrides, SweepArgs, TrainArgs};

pub enum Failure {
    /// Bad arguments; exit code 2.
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_variant(s: &str) -> Result<Variant, Failure> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn deterministic() -> bool {
    std::env::var("HIDE_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn load_config(o: &ModelOverrides) -> Result<Config, Failure> {
    let mut cfg = match &o.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    if let Some(v) = &o.variant {
        cfg.model.variant = parse_variant(v)?;
    }
    if let Some(s) = o.seed {
        cfg.model.seed = s;
    }
    if let Some(n) = o.steps {
        cfg.train.steps = n;
    }
    Ok(cfg)
}

fn training_corpus(o: &ModelOverrides, cfg: &Config) -> Result<Corpus, Failure> {
    Ok(match &o.corpus {
        Some(dir) => Corpus::from_dir(dir)?,
        None => Corpus::training(cfg.train.corpus_size, cfg.train.patch_size),
    })
}

/// Runs `$body` with `$t` bound to the element type named by `$dtype`.
macro_rules! with_precision {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn read_checkpoint_config(path: &Path) -> Result<(Vec<u8>, ModelConfig), Failure> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let cfg = checkpoint::read_config(&bytes)?;
    Ok((bytes, cfg))
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.model)?;
    if let Some(l) = a.lambda {
        cfg.model.lambda = l;
    }
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    let resume = a.resume.as_deref().map(read_checkpoint_config).transpose()?;
    let precision = resume.as_ref().map_or(cfg.model.precision, |(_, c)| c.precision);
    let corpus = training_corpus(&a.model, &cfg)?;
    with_precision!(precision, T => {
        let model = match &resume {
            Some((bytes, _)) => checkpoint::from_bytes::<T>(bytes)?,
            None => Model::<T>::new(cfg.model.clone())?,
        };
        println!(
            "variant={} lambda={} params={} steps={}",
            model.config.variant.name(),
            model.config.lambda,
            model.param_count(),
            cfg.train.steps
        );
        let mut trainer = Trainer::new(model, &corpus, cfg.train.clone())?;
        trainer.run(|r| println!("{r}"))?;
        checkpoint::save(&trainer.model, &a.out)?;
        println!("wrote {} (hash {})", a.out.display(), codec::hex(&trainer.model.hash()));
    });
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Outcome {
    let (bytes, cfg) = read_checkpoint_config(&a.checkpoint)?;
    let img = Image::read(&a.input)?;
    with_precision!(cfg.precision, T => {
        let model = checkpoint::from_bytes::<T>(&bytes)?;
        let enc = codec::encode(&model, &img)?;
        enc.compressed.write(&a.out)?;
        let bits = enc.compressed.file_bits();
        let pixels = (img.width * img.height) as f64;
        println!(
            "bits={bits} bpp={:.6} psnr={} estimated_bits={:.3}",
            bits as f64 / pixels,
            format_db(psnr(&img.data, &enc.reconstruction.data)?),
            enc.estimated_bits()
        );
    });
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Outcome {
    let (bytes, cfg) = read_checkpoint_config(&a.checkpoint)?;
    let c = CompressedImage::read(&a.input)?;
    with_precision!(cfg.precision, T => {
        let model = checkpoint::from_bytes::<T>(&bytes)?;
        let (img, _) = codec::decode(&model, &c)?;
        img.write(&a.out)?;
        print!("decoded {}x{}x{}", img.width, img.height, img.channels);
        if let Some(r) = &a.reference {
            let reference = Image::read(r)?;
            print!(" psnr={}", format_db(psnr(&reference.data, &img.data)?));
        }
        println!();
    });
    Ok(())
}

fn named_images(paths: &[PathBuf]) -> Result<Vec<(String, Image)>, Failure> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            Ok((name, Image::read(p)?))
        })
        .collect()
}

fn evaluation_images(count: usize, size: usize) -> Vec<(String, Image)> {
    Corpus::evaluation(count, size).images.into_iter().enumerate().map(|(i, img)| (format!("eval{i}"), img)).collect()
}

pub fn analyze(a: AnalyzeArgs) -> Outcome {
    let (bytes, cfg) = read_checkpoint_config(&a.checkpoint)?;
    let images = if a.images.is_empty() { evaluation_images(4, 64) } else { named_images(&a.images)? };
    fs::create_dir_all(&a.out)?;
    with_precision!(cfg.precision, T => analyze_model(&checkpoint::from_bytes::<T>(&bytes)?, &images, &a))
}

fn analyze_model<T: Real>(model: &Model<T>, images: &[(String, Image)], a: &AnalyzeArgs) -> Outcome {
    println!("variant={} params={} estimator_params={}", model.config.variant.name(), model.param_count(), model.estimator_param_count());
    let plain: Vec<Image> = images.iter().map(|(_, i)| i.clone()).collect();
    let (report, heatmaps) = utilization_report(model, &plain, a.top_k)?;
    for d in &report.dictionaries {
        println!("dictionary={} entries={} entropy_bits={:.6} max_bits={:.6}", d.name, d.usage.len(), d.entropy_bits, d.max_entropy_bits());
    }
    fs::write(a.out.join("utilization.txt"), report.to_text())?;
    for h in &heatmaps {
        let name = format!("heatmap_{}_{}_{}.pgm", images[h.image].0, h.dictionary, h.entry);
        h.to_image()?.write(a.out.join(name))?;
    }
    for (name, img) in images {
        let map = entropy_map(model, img)?;
        Image::new(map.width, map.height, 1, scale_to_u8(map.bits.data()))?.write(a.out.join(format!("entropy_{name}.pgm")))?;
        save_matrix(a.out.join(format!("entropy_{name}.hidm")), &map.bits)?;
        for (i, s) in map.slices.iter().enumerate() {
            for (kind, t) in [("mu", &s.mu), ("sigma", &s.sigma), ("residual", &s.residual), ("normalized", &s.normalized)] {
                save_matrix(a.out.join(format!("{kind}_{name}_slice{i}.hidm")), t)?;
            }
        }
        println!("image={name} estimated_y_bits={:.3}", map.total_bits);
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<metrics::RdRecord>, Failure> {
    let f = fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(metrics::read_csv(std::io::BufReader::new(f))?)
}

pub fn bdrate(a: BdrateArgs) -> Outcome {
    let pct = bd_rate_records(&read_records(&a.anchor)?, &read_records(&a.test)?)?;
    // Avoid printing "-0.00" for curves that agree to rounding.
    let pct = if pct.abs() < 0.005 { 0.0 } else { pct };
    println!("{pct:.2}");
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Outcome {
    let cfg = load_config(&a.model)?;
    let variants = a.variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>, _>>()?;
    if variants.is_empty() {
        return Err(usage("--variants is empty"));
    }
    let lambdas = if a.lambdas.is_empty() { LAMBDAS.to_vec() } else { a.lambdas.clone() };
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(usage("every λ must be positive"));
    }
    let eval = match &a.eval_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")));
            paths.sort();
            named_images(&paths)?
        }
        None => evaluation_images(a.eval_count, a.eval_size.unwrap_or(cfg.train.patch_size)),
    };
    if eval.is_empty() {
        return Err(usage("no evaluation images"));
    }
    let corpus = training_corpus(&a.model, &cfg)?;
    let jobs = if deterministic() { 1 } else { a.jobs.max(1) };
    fs::create_dir_all(&a.out)?;
    for variant in variants {
        let base = ModelConfig { variant, ..cfg.model.clone() };
        base.validate().map_err(|e| usage(e.to_string()))?;
        let records = with_precision!(base.precision, T => sweep_variant::<T>(&base, &cfg, &lambdas, &corpus, &eval, jobs, &a.out)?);
        let path = a.out.join(format!("{}.csv", variant.name()));
        let mut f = fs::File::create(&path)?;
        metrics::write_csv(&mut f, &records)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep_variant<T: Real>(
    base: &ModelConfig,
    cfg: &Config,
    lambdas: &[f64],
    corpus: &Corpus,
    eval: &[(String, Image)],
    jobs: usize,
    out: &Path,
) -> Result<Vec<metrics::RdRecord>, Failure> {
    let name = base.variant.name();
    let log_every = cfg.train.log_every;
    let run = |i: usize| -> Result<Vec<metrics::RdRecord>, Error> {
        let (model, records) = sweep_point::<T>(base, &cfg.train, i, lambdas[i], corpus, eval, |ev| match ev {
            SweepEvent::Step { lambda, record } if record.step % log_every == 0 => eprintln!("{name} lambda={lambda} {record}"),
            SweepEvent::Evaluated(r) => eprintln!("{name} {r}"),
            _ => {}
        })?;
        checkpoint::save(&model, out.join(format!("{name}_lambda{i}.ckpt")))?;
        Ok(records)
    };
    let mut per_point: Vec<Option<Result<Vec<metrics::RdRecord>, Error>>> = (0..lambdas.len()).map(|_| None).collect();
    for chunk in (0..lambdas.len()).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&i| (i, s.spawn(move || run(i)))).collect();
            for (i, h) in handles {
                per_point[i] = Some(h.join().unwrap_or_else(|_| Err(Error::InvalidArgument(format!("training run {i} panicked")))));
            }
        });
    }
    let mut records = Vec::new();
    for r in per_point.into_iter().flatten() {
        records.extend(r?);
    }
    Ok(records)
}
