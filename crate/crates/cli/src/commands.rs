use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use se_explain::data::{
    load_split, read_image, synthetic, write_cifar10, write_image, DatasetKind, DatasetSplit, Normalization, RgbImage, Split,
    DATA_DIR_ENV,
};
use se_explain::explain::{explain as explain_image, overlay, Method};
use se_explain::metrics::{evaluate_method, CurveConfig, EvalConfig};
use se_explain::model::{aggregate_se_values, build_smallcnn, load_checkpoint, save_checkpoint};
use se_explain::train::{ablation_accuracy, train as fit, TrainConfig};
use se_explain::{Error, ModelGraph, Tensor};

use crate::{AblateArgs, DataArgs, DistfitArgs, ExplainArgs, MetricsArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NoSeBlock => CliError::Usage(format!(
                "{e}; the se method, ablation and distribution fit need a checkpoint trained with --se"
            )),
            Error::InvalidArgument { .. } => CliError::Usage(e.to_string()),
            e if e.is_data_error() => CliError::Data(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_output(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => write_output(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dataset_kind(args: &DataArgs) -> CliResult<DatasetKind> {
    args.data
        .parse()
        .map_err(|e: String| CliError::Usage(format!("invalid value for --data: {e}")))
}

fn dataset_dir(args: &DataArgs) -> CliResult<PathBuf> {
    match &args.dir {
        Some(d) => Ok(d.clone()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("no dataset directory: pass --dir or set {DATA_DIR_ENV}"))),
    }
}

fn load(args: &DataArgs, split: Split) -> CliResult<DatasetSplit> {
    let kind = dataset_kind(args)?;
    let dir = dataset_dir(args)?;
    let data = load_split(kind, &dir, split).map_err(|e| CliError::Data(e.to_string()))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{} {split:?} split is empty", kind.name())));
    }
    Ok(data)
}

fn load_model(path: &Path) -> CliResult<ModelGraph> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_method(s: &str) -> CliResult<Method> {
    s.parse()
        .map_err(|e: Error| CliError::Usage(format!("invalid value for --method: {e}")))
}

fn check_input_shape(model: &ModelGraph, data: &DatasetSplit) -> CliResult {
    let shape = data.image_shape().expect("non-empty split");
    if shape != model.input_shape {
        return Err(CliError::Data(format!(
            "dataset images are {shape:?} but the model expects {:?}",
            model.input_shape
        )));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult {
    let kind = dataset_kind(&a.data)?;
    let se = !a.no_se;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("model_{}_{}.ckpt", kind.name(), if se { "se" } else { "nose" })));
    let train_split = load(&a.data, Split::Train)?;
    let test_split = load(&a.data, Split::Test)?;
    let shape = train_split.image_shape().expect("non-empty split");
    let mut model = build_smallcnn(kind.num_classes(), shape, se, a.reduction)?;
    model.initialize(a.seed);
    model.normalization = Some(Normalization::from_split(&train_split)?);
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        subset_fraction: a.subset,
        augment: !a.no_augment,
    };
    let history = fit(&mut model, &train_split, &test_split, &cfg, &mut |s| println!("{}", s.progress_line()))?;
    let final_acc = history.epochs.last().map_or(f64::NAN, |e| e.test_acc);
    for (k, v) in [
        ("dataset", kind.name().to_string()),
        ("se", se.to_string()),
        ("epochs", a.epochs.to_string()),
        ("final_accuracy", final_acc.to_string()),
        ("seed", a.seed.to_string()),
        ("lr", a.lr.to_string()),
        ("momentum", a.momentum.to_string()),
        ("weight_decay", a.weight_decay.to_string()),
        ("batch_size", a.batch.to_string()),
        ("subset", a.subset.to_string()),
    ] {
        model.metadata.insert(k.to_string(), v);
    }
    save_checkpoint(&model, &out).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    write_output(&out.with_extension("history.csv"), history.to_csv().as_bytes())?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn image_to_tensor(image: &RgbImage, channels: usize) -> Tensor<f32> {
    let rgb = image.to_tensor();
    if channels == 3 {
        return rgb;
    }
    let plane = image.width * image.height;
    let gray = (0..plane)
        .map(|i| (rgb.data()[i] + rgb.data()[plane + i] + rgb.data()[2 * plane + i]) / 3.0)
        .collect();
    Tensor::new(&[1, image.height, image.width], gray).expect("sized image")
}

pub fn explain(a: ExplainArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let method = parse_method(&a.method)?;
    if method == Method::Se && !model.se_enabled() {
        return Err(Error::NoSeBlock.into());
    }
    let [c, h, w] = model.input_shape;
    let (rgb, pixels) = match (&a.image, a.index) {
        (Some(path), _) => {
            let rgb = read_image(path).map_err(|e| CliError::Data(e.to_string()))?;
            if (rgb.height, rgb.width) != (h, w) {
                return Err(CliError::Data(format!(
                    "{} is {}x{} but the model expects {w}x{h}",
                    path.display(),
                    rgb.width,
                    rgb.height
                )));
            }
            let pixels = image_to_tensor(&rgb, c);
            (rgb, pixels)
        }
        (None, Some(index)) => {
            let test = load(&a.data, Split::Test)?;
            check_input_shape(&model, &test)?;
            let item = test.images.get(index).ok_or_else(|| {
                CliError::Usage(format!("--index {index} outside the {} test images", test.len()))
            })?;
            (RgbImage::from_tensor(&item.pixels)?, item.pixels.clone())
        }
        (None, None) => return Err(CliError::Usage("pass --image or --index".into())),
    };
    let map = explain_image(&model, &pixels, method, a.top_frac, a.seed)?;
    let blended = overlay(&rgb, &map, a.alpha)?;
    write_image(&a.out, &blended).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", a.out.display())))?;
    if a.dump_saliency {
        write_output(&a.out.with_extension("saliency.csv"), map.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let method = parse_method(&a.method)?;
    let test = load(&a.data, Split::Test)?;
    check_input_shape(&model, &test)?;
    if a.n > test.len() {
        eprintln!("warning: --n {} exceeds the {} test images; using {}", a.n, test.len(), test.len());
    }
    let cfg = EvalConfig {
        method,
        n_images: a.n.min(test.len()),
        seed: a.seed,
        top_fraction: a.top_frac,
        curve: CurveConfig {
            steps: a.steps,
            blur_sigma: a.blur_sigma,
            blur_radius: a.blur_radius,
        },
    };
    let eval = evaluate_method(&model, &test, &cfg)?;
    emit(a.out.as_deref(), &(eval.to_json() + "\n"))?;
    if let Some(csv) = &a.csv {
        write_output(csv, eval.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CliResult {
    let model = load_model(&a.model)?;
    if !model.se_enabled() {
        return Err(Error::NoSeBlock.into());
    }
    let test = load(&a.data, Split::Test)?;
    check_input_shape(&model, &test)?;
    let with_control = a.control == "random";
    let mut out = String::from(if with_control {
        "fraction,accuracy,control_accuracy\n"
    } else {
        "fraction,accuracy\n"
    });
    for &f in &a.fractions {
        let acc = ablation_accuracy(&model, &test, f, None)?;
        out.push_str(&format!("{f},{acc}"));
        if with_control {
            let mut total = 0.0;
            for k in 0..a.control_seeds as u64 {
                total += ablation_accuracy(&model, &test, f, Some(a.seed.wrapping_add(k)))?;
            }
            out.push_str(&format!(",{}", total / a.control_seeds as f64));
        }
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)
}

#[derive(Serialize)]
struct DistfitSummary {
    mu: f64,
    sigma: f64,
    skewness: f64,
    excess_kurtosis: f64,
    raw_mean: f64,
    samples: usize,
    values: usize,
}

/// Symmetric histogram over `[-r, r]` with `r = max |v|`; counts only.
fn histogram(values: &[f64], bins: usize) -> (f64, Vec<usize>) {
    let r = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut counts = vec![0; bins];
    for &v in values {
        let bin = if r > 0.0 {
            (((v + r) / (2.0 * r) * bins as f64).floor() as usize).min(bins - 1)
        } else {
            bins / 2
        };
        counts[bin] += 1;
    }
    (r, counts)
}

pub fn distfit(a: DistfitArgs) -> CliResult {
    let model = load_model(&a.model)?;
    if !model.se_enabled() {
        return Err(Error::NoSeBlock.into());
    }
    let test = load(&a.data, Split::Test)?;
    check_input_shape(&model, &test)?;
    let stats = aggregate_se_values(&model, test.images.iter(), a.max_samples)?;
    let (r, counts) = histogram(&stats.values, a.bins);
    let width = if r > 0.0 { 2.0 * r / a.bins as f64 } else { 0.0 };
    let mut csv = String::from("bin_lower,bin_upper,count\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = -r + i as f64 * width;
        csv.push_str(&format!("{lo},{},{c}\n", lo + width));
    }
    write_output(&a.hist, csv.as_bytes())?;
    let summary = DistfitSummary {
        mu: stats.mu,
        sigma: stats.sigma,
        skewness: stats.skewness,
        excess_kurtosis: stats.excess_kurtosis,
        raw_mean: stats.raw_mean,
        samples: stats.samples,
        values: stats.values.len(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("numeric summary serializes");
    emit(a.out.as_deref(), &(json + "\n"))
}

pub fn synth(a: SynthArgs) -> CliResult {
    fs::create_dir_all(&a.dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", a.dir.display())))?;
    let classes = a.classes as usize;
    let train_split = synthetic::generate(a.train, classes, 32, a.seed, Split::Train);
    let test_split = synthetic::generate(a.test, classes, 32, a.seed ^ 0xFFFF_FFFF, Split::Test);
    let per_file = a.train.div_ceil(5);
    for (i, chunk) in train_split.images.chunks(per_file.max(1)).enumerate() {
        let path = a.dir.join(format!("data_batch_{}.bin", i + 1));
        write_cifar10(&path, chunk).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    for i in train_split.images.chunks(per_file.max(1)).count()..5 {
        write_output(&a.dir.join(format!("data_batch_{}.bin", i + 1)), &[])?;
    }
    write_cifar10(&a.dir.join("test_batch.bin"), &test_split.images).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}
