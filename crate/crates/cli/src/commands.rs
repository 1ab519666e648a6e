use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use facecomp_core::checkpoint::{load_checkpoint, read_manifest};
use facecomp_core::code::{FaceCode, LayeredCode};
use facecomp_core::geometry::ComponentId;
use facecomp_core::imaging::Image;
use facecomp_core::metrics::{
    attribute_components, chi_square_yates, edit_accuracy_sweep, ifg, mse_irr, recon_metrics, ContingencyTable,
    RegionMask,
};
use facecomp_core::networks::{DecoderMode, FaceModel, ModelConfig};
use facecomp_core::reasoning::{
    dataset_hash, debias_directions, direction_meandiff, direction_svm, edit_attribute, intervene_zero, pca_edit,
    pca_fit, rectify_direction, transfer_components, AttributeDirection, DebiasOptions, LevelRange, PcaBasis,
    SvmOptions,
};
use facecomp_core::sprites::{
    generate_sprites, load_folder, measure_sprite, read_attributes, save_dataset, split_indices, BiasSpec,
    LabeledImage,
};
use facecomp_core::trainer::{DatasetSpec, TrainConfig, Trainer};
use serde_json::{json, Value};

use crate::*;

const ENCODE_CHUNK: usize = 64;

pub(crate) fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Edit(a) => edit(a),
        Command::Transfer(a) => transfer(a),
        Command::Direction(a) => direction(a),
        Command::Pca(a) => pca(a),
        Command::Metrics(a) => metrics(a),
        Command::BiasReport(a) => bias_report(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(v: &Value) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<FaceModel, CliError> {
    Ok(load_checkpoint(checkpoint)?.model)
}

fn components(list: &str) -> Result<Vec<ComponentId>, CliError> {
    if list.trim() == "all" {
        return Ok(ComponentId::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let c: ComponentId = name.parse().map_err(|e| CliError::new("usage", e))?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn name_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A code file holding either one code or per-layer codes.
enum CodeFile {
    Plain(FaceCode),
    Layered(LayeredCode),
}

impl CodeFile {
    fn load(path: &Path) -> Result<Self, CliError> {
        let v: Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?)?;
        Ok(match v.get("layers").and_then(Value::as_array) {
            Some(layers) => CodeFile::Layered(LayeredCode::from_json(&v, layers.len())?),
            None => CodeFile::Plain(FaceCode::from_json(&v)?),
        })
    }

    fn layered(self, num_layers: usize) -> LayeredCode {
        match self {
            CodeFile::Plain(c) => LayeredCode::uniform(&c, num_layers),
            CodeFile::Layered(l) => l,
        }
    }

    fn map(self, f: impl Fn(&FaceCode) -> Result<FaceCode, CliError>) -> Result<Self, CliError> {
        Ok(match self {
            CodeFile::Plain(c) => CodeFile::Plain(f(&c)?),
            CodeFile::Layered(l) => {
                let layers = (0..l.layers.len())
                    .map(|k| f(&l.layer(k)).map(|c| c.components))
                    .collect::<Result<_, _>>()?;
                CodeFile::Layered(LayeredCode { icon: l.icon, layers })
            }
        })
    }

    /// Save to `out`, or print the JSON when no path is given.
    fn emit(&self, out: Option<&Path>) -> Result<(), CliError> {
        match (self, out) {
            (CodeFile::Plain(c), Some(p)) => c.save(p)?,
            (CodeFile::Layered(l), Some(p)) => l.save(p)?,
            (CodeFile::Plain(c), None) => print_json(&c.to_json("stdout"))?,
            (CodeFile::Layered(l), None) => print_json(&l.to_json("stdout"))?,
        }
        Ok(())
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let bias = a.bias_rate.map(|rate| BiasSpec { rate });
    let items = generate_sprites(a.count, a.resolution, a.seed, bias)?;
    save_dataset(&a.out, &items)?;
    print_json(&json!({ "out": a.out, "count": items.len(), "resolution": a.resolution, "seed": a.seed }))
}

fn preset(name: &str, mode: DecoderMode) -> Result<ModelConfig, CliError> {
    Ok(match name {
        "tiny" => ModelConfig::tiny(mode),
        "toy" => ModelConfig::toy(mode),
        "desk" => ModelConfig::desk(mode),
        other => return Err(CliError::new("usage", format!("unknown preset `{other}` (tiny, toy, desk)"))),
    })
}

fn decoder_mode(name: &str) -> Result<DecoderMode, CliError> {
    match name.to_ascii_lowercase().as_str() {
        "cam" => Ok(DecoderMode::Cam),
        "global" | "globalmodulation" => Ok(DecoderMode::GlobalModulation),
        other => Err(CliError::new("usage", format!("unknown decoder mode `{other}` (cam, global)"))),
    }
}

/// Training configuration from `--config` (if any) with flags applied on top.
pub(crate) fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mode = a.mode.as_deref().map(decoder_mode).transpose()?;
    let mut config = match &a.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?
        }
        None => {
            let model = preset(a.preset.as_deref().unwrap_or("desk"), mode.unwrap_or(DecoderMode::Cam))?;
            let dataset = DatasetSpec::Sprites {
                count: 0,
                seed: 0,
                bias: None,
            };
            let mut c = TrainConfig::new(model, dataset, 2000);
            c.checkpoint_every = 1000;
            if a.data.is_none() && a.sprites.is_none() {
                return Err(CliError::new("config", "no training data: give --data, --sprites or --config"));
            }
            c
        }
    };
    if let Some(p) = &a.preset {
        let m = mode.unwrap_or(config.model.decoder.mode);
        config.model = ModelConfig {
            seed: config.model.seed,
            ..preset(p, m)?
        };
    } else if let Some(m) = mode {
        config.model.decoder.mode = m;
    }
    if let Some(path) = &a.data {
        config.dataset = DatasetSpec::Folder { path: path.clone() };
    }
    if let Some(count) = a.sprites {
        let (seed, bias) = match &config.dataset {
            DatasetSpec::Sprites { seed, bias, .. } => (*seed, *bias),
            DatasetSpec::Folder { .. } => (0, None),
        };
        config.dataset = DatasetSpec::Sprites { count, seed, bias };
    }
    if let DatasetSpec::Sprites { seed, bias, .. } = &mut config.dataset {
        if let Some(s) = a.data_seed {
            *seed = s;
        }
        if let Some(rate) = a.bias_rate {
            *bias = Some(BiasSpec { rate });
        }
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(s) = a.seed {
        config.seed = s;
        config.model.seed = s;
    }
    if let Some(lr) = a.lr {
        config.optimizer.lr = lr;
    }
    if let Some(e) = a.checkpoint_every {
        config.checkpoint_every = e;
    }
    if a.no_perceptual {
        config.perceptual = false;
    }
    if a.no_perturb {
        config.perturb_inputs = false;
    }
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, a.steps)?,
        None => {
            let out = a
                .out
                .clone()
                .ok_or_else(|| CliError::new("usage", "--out is required for a new run"))?;
            Trainer::new(train_config(&a)?, &out)?
        }
    };
    let every = a.log_every;
    let last = trainer.run(|step, r| {
        if every > 0 && step % every == 0 {
            tracing::info!(
                "step {step}: l1 {:.5} perceptual {:.5} g_adv {:.4} d_adv {:.4} r1 {:.4}",
                r.l1_pixel,
                r.perceptual,
                r.g_adv,
                r.d_adv,
                r.r1
            );
        }
    })?;
    print_json(&json!({
        "checkpoint": last,
        "steps": trainer.step(),
        "losses": trainer.loss_path(),
        "last": trainer.history().last(),
    }))
}

fn encode(a: EncodeArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let res = model.config().image_resolution();
    if a.image.is_dir() {
        let out = a
            .out
            .ok_or_else(|| CliError::new("usage", "--out <dir> is required when encoding a folder"))?;
        std::fs::create_dir_all(&out)?;
        let items = load_folder(&a.image, res)?;
        let mut written = Vec::with_capacity(items.len());
        for chunk in items.chunks(ENCODE_CHUNK) {
            let codes = model.encode_batch(&chunk.iter().map(|i| &i.pixels).collect::<Vec<_>>())?;
            for (item, code) in chunk.iter().zip(codes) {
                let path = out.join(format!("{}.code", name_of(Path::new(&item.name))));
                code.save(&path)?;
                written.push(path);
            }
        }
        return print_json(&json!({ "codes": written }));
    }
    let code = model.encode(&Image::load(&a.image, res)?)?;
    CodeFile::Plain(code).emit(a.out.as_deref())
}

fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let img = match CodeFile::load(&a.code)? {
        CodeFile::Plain(c) => model.decode(&c)?,
        CodeFile::Layered(l) => {
            let n = model.config().num_styled_layers();
            if l.layers.len() != n {
                return Err(CliError::new("code", format!("{} layers in file, model has {n}", l.layers.len())));
            }
            model.decode_layered(&l)?
        }
    };
    img.save_png(&a.out)?;
    Ok(())
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    if a.direction.is_none() && a.pca.is_none() && a.zero.is_none() {
        return Err(CliError::new("usage", "give one of --direction, --pca or --zero"));
    }
    let code = CodeFile::load(&a.code)?;
    let edited = if let Some(path) = &a.direction {
        let dir = AttributeDirection::load(path)?;
        let alpha = a.alpha.ok_or_else(|| CliError::new("usage", "--alpha is required with --direction"))?;
        code.map(|c| Ok(edit_attribute(c, &dir, alpha)?))?
    } else if let Some(path) = &a.pca {
        let basis = PcaBasis::load(path)?;
        let (index, delta) = (a.index.unwrap_or(0), a.delta.unwrap_or(0.0));
        code.map(|c| Ok(pca_edit(c, &basis, index, delta)?))?
    } else if let Some(list) = &a.zero {
        let comps = components(list)?;
        code.map(|c| Ok(intervene_zero(c, &comps)))?
    } else {
        unreachable!("checked above")
    };
    edited.emit(a.out.as_deref())
}

fn transfer(a: TransferArgs) -> Result<(), CliError> {
    let comps = components(&a.components)?;
    if comps.is_empty() {
        return Err(CliError::new("usage", "--components must name at least one component"));
    }
    let target = CodeFile::load(&a.target)?;
    let reference = CodeFile::load(&a.reference)?;
    let range = a
        .level_range
        .as_deref()
        .map(str::parse::<LevelRange>)
        .transpose()?
        .filter(|r| *r != LevelRange::All);
    let result = match (target, reference, range) {
        (CodeFile::Plain(t), CodeFile::Plain(r), None) => CodeFile::Plain(transfer_components(&t, &r, &comps)?),
        (t, r, range) => {
            let (n, layers) = match &a.checkpoint {
                Some(ckpt) => {
                    let cfg = read_manifest(ckpt)?.config;
                    let n = cfg.num_styled_layers();
                    (n, range.unwrap_or(LevelRange::All).layers(&cfg))
                }
                None => {
                    let n = match (&t, &r) {
                        (CodeFile::Layered(l), _) | (_, CodeFile::Layered(l)) => l.layers.len(),
                        _ => unreachable!("plain pair without a level range is handled above"),
                    };
                    (n, 0..n)
                }
            };
            let (t, r) = (t.layered(n), r.layered(n));
            if t.layers.len() != n || r.layers.len() != n {
                return Err(CliError::new("code", format!("codes must have {n} layers")));
            }
            let mut out = t.clone();
            for k in layers {
                out.layers[k] = transfer_components(&t.layer(k), &r.layer(k), &comps)?.components;
            }
            CodeFile::Layered(out)
        }
    };
    result.emit(a.out.as_deref())
}

/// Indices of `items` in `split` that carry every label in `attributes`.
fn split_items(items: &[LabeledImage], split: &str, attributes: &[&str]) -> Result<Vec<usize>, CliError> {
    let s = split_indices(items.len(), [0.9, 0.05, 0.05], 0)?;
    let pool = match split {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        "all" => (0..items.len()).collect(),
        other => return Err(CliError::new("usage", format!("unknown split `{other}` (train, val, test, all)"))),
    };
    Ok(pool
        .into_iter()
        .filter(|&i| attributes.iter().all(|a| items[i].labels.contains_key(*a)))
        .collect())
}

fn encode_items(model: &FaceModel, items: &[LabeledImage], idx: &[usize]) -> Result<Vec<FaceCode>, CliError> {
    let mut codes = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(ENCODE_CHUNK) {
        codes.extend(model.encode_batch(&chunk.iter().map(|&i| &items[i].pixels).collect::<Vec<_>>())?);
    }
    Ok(codes)
}

fn direction(a: DirectionArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let items = load_folder(&a.data, model.config().image_resolution())?;
    let mut needed = vec![a.attribute.as_str()];
    if a.method == "debiased" {
        needed.push(
            a.confound
                .as_deref()
                .ok_or_else(|| CliError::new("usage", "--confound is required for the debiased method"))?,
        );
    }
    let idx = split_items(&items, &a.split, &needed)?;
    if idx.is_empty() {
        return Err(CliError::new("dataset", format!("no `{}` labels in split `{}`", a.attribute, a.split)));
    }
    let labels: Vec<i8> = idx.iter().map(|&i| items[i].labels[&a.attribute]).collect();
    let relevant: BTreeSet<ComponentId> = match &a.relevant {
        Some(list) => components(list)?.into_iter().collect(),
        None => attribute_components(&a.attribute)
            .map(|c| c.iter().copied().collect())
            .unwrap_or_else(|| ComponentId::ALL.into_iter().collect()),
    };
    let codes = encode_items(&model, &items, &idx)?;
    let name = a.name.clone().unwrap_or_else(|| a.attribute.clone());
    let svm = SvmOptions {
        c: a.c,
        ..Default::default()
    };
    let mut report = None;
    let dir = match a.method.as_str() {
        "meandiff" => direction_meandiff(&name, &codes, &labels, &relevant)?,
        "svm" => direction_svm(&name, &codes, &labels, &relevant, &svm)?,
        "rectified" => {
            let cond_path = a
                .condition
                .as_deref()
                .ok_or_else(|| CliError::new("usage", "--condition is required for the rectified method"))?;
            let base = direction_svm(&name, &codes, &labels, &relevant, &svm)?;
            rectify_direction(&base, &AttributeDirection::load(cond_path)?)?
        }
        "debiased" => {
            let confound = a.confound.as_deref().expect("checked above");
            let conf: Vec<i8> = idx.iter().map(|&i| items[i].labels[confound]).collect();
            let options = DebiasOptions {
                name: name.clone(),
                edit_components: relevant.clone(),
                relevant: relevant.clone(),
                svm,
            };
            let r = debias_directions(Some(&model), &codes, &labels, &conf, &options)?;
            report = Some(json!({
                "before": r.before,
                "after": r.after,
                "virtual_samples": r.virtual_samples,
            }));
            r.debiased
        }
        other => {
            return Err(CliError::new(
                "usage",
                format!("unknown method `{other}` (meandiff, svm, rectified, debiased)"),
            ))
        }
    };
    let dir = dir.with_dataset_hash(dataset_hash(&codes));
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.json")));
    dir.save(&out)?;
    print_json(&json!({
        "out": out,
        "name": dir.name,
        "samples": codes.len(),
        "relevant_components": dir.relevant,
        "norm": dir.norm,
        "debias": report,
    }))
}

fn pca(a: PcaArgs) -> Result<(), CliError> {
    let comps = components(&a.component)?;
    let model = load_model(&a.checkpoint)?;
    let items = load_folder(&a.data, model.config().image_resolution())?;
    let idx = split_items(&items, &a.split, &[])?;
    let codes = encode_items(&model, &items, &idx)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut written = Vec::new();
    for c in comps {
        let basis = pca_fit(&codes, c, a.k)?;
        let path = a.out_dir.join(format!("pca_{}.json", c.name()));
        basis.save(&path)?;
        written.push(json!({ "component": c, "path": path, "variances": basis.variances }));
    }
    print_json(&json!({ "samples": codes.len(), "bases": written }))
}

fn load_matching(dir: &Path, names: &[String], res: usize) -> Result<Vec<Image>, CliError> {
    names
        .iter()
        .map(|n| Image::load(&dir.join(n), res).map_err(|e| CliError::new("image", format!("{}: {e}", dir.join(n).display()))))
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn metrics(a: MetricsArgs) -> Result<(), CliError> {
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let res = model.as_ref().map_or(a.resolution, |m| m.config().image_resolution());
    let source = load_folder(&a.source, res)?;
    let names: Vec<String> = source.iter().map(|s| s.name.clone()).collect();
    let recon = a.recon.as_deref().map(|d| load_matching(d, &names, res)).transpose()?;
    let edited = a.edited.as_deref().map(|d| load_matching(d, &names, res)).transpose()?;
    let mask = match (&a.attribute, &edited) {
        (Some(attr), Some(_)) => {
            let boxes = facecomp_core::geometry::BoxSet::default_for(res).map_err(|e| CliError::new("geometry", e))?;
            Some(RegionMask::for_attribute(attr, &boxes)?)
        }
        _ => None,
    };

    let mut rows = Vec::with_capacity(source.len());
    let (mut mses, mut psnrs, mut ssims, mut irrs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, s) in source.iter().enumerate() {
        let m = recon.as_ref().map(|r| recon_metrics(&s.pixels, &r[i])).transpose()?;
        let irr = match (&recon, &edited, &mask) {
            (Some(r), Some(e), Some(mask)) => Some(mse_irr(&r[i], &e[i], mask)?),
            _ => None,
        };
        if let Some(m) = m {
            mses.push(m.mse);
            psnrs.push(m.psnr);
            ssims.push(m.ssim);
        }
        irrs.extend(irr);
        rows.push((s.name.clone(), m, irr));
    }
    let gap = match (&model, &recon, &edited) {
        (Some(m), Some(r), Some(e)) => Some(ifg(m, r, e)?),
        _ => None,
    };
    let sweep = match (&a.direction, &model, &a.attribute) {
        (Some(path), Some(m), Some(attr)) => {
            let dir = AttributeDirection::load(path)?;
            let alphas = a
                .alphas
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::new("usage", format!("bad alpha `{s}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            // only sprites that do not already show the attribute
            let pool: Vec<Image> = source
                .iter()
                .filter(|s| measure_sprite(&s.pixels).attribute_value(attr).is_some_and(|v| v < 0.5))
                .map(|s| s.pixels.clone())
                .collect();
            let acc = edit_accuracy_sweep(m, &dir, &pool, attr, &alphas)?;
            Some(json!({ "samples": pool.len(), "alphas": alphas, "accuracy": acc }))
        }
        _ => None,
    };
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "mse", "psnr", "ssim", "mse_irr"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, m, irr) in &rows {
            w.write_record([
                name.clone(),
                f(m.map(|m| m.mse)),
                f(m.map(|m| m.psnr)),
                f(m.map(|m| m.ssim)),
                f(*irr),
            ])?;
        }
        w.flush()?;
    }
    print_json(&json!({
        "images": source.len(),
        "mse": mean(&mses),
        "psnr": mean(&psnrs),
        "ssim": mean(&ssims),
        "mse_irr": mean(&irrs),
        "ifg": gap,
        "edit_accuracy": sweep,
    }))
}

fn bias_report(a: BiasReportArgs) -> Result<(), CliError> {
    let table = if let Some(counts) = &a.counts {
        let v = counts
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::new("usage", format!("bad --counts `{counts}`: {e}")))?;
        let [x, y, z, w] = v[..] else {
            return Err(CliError::new("usage", format!("--counts needs four numbers, got {}", v.len())));
        };
        ContingencyTable::new([[x, y], [z, w]])
    } else if let Some(path) = &a.labels {
        let (row, col) = (a.row.as_deref().unwrap_or_default(), a.column.as_deref().unwrap_or_default());
        let labels = read_attributes(path)?;
        let mut counts = [[0u64; 2]; 2];
        for l in labels.values() {
            if let (Some(&r), Some(&c)) = (l.get(row), l.get(col)) {
                counts[usize::from(r < 0)][usize::from(c < 0)] += 1;
            }
        }
        let (r, c) = (row.to_string(), col.to_string());
        ContingencyTable::new(counts).with_labels([&r, &format!("not {r}")], [&c, &format!("not {c}")])
    } else {
        return Err(CliError::new("usage", "give --counts or --labels"));
    };
    let test = chi_square_yates(&table)?;
    if a.json {
        return print_json(&json!({
            "counts": table.counts,
            "rows": table.row_labels,
            "columns": table.col_labels,
            "chi2": test.chi2,
            "p_value": test.p_value,
            "log10_p": test.log10_p,
        }));
    }
    print!("{table}");
    let p = if test.p_value > 0.0 {
        format!("{:.3e}", test.p_value)
    } else {
        let e = test.log10_p.floor();
        format!("{:.2}e{e}", 10f64.powf(test.log10_p - e))
    };
    println!("chi2 = {:.4}  p = {p}  log10(p) = {:.4}  n = {}", test.chi2, test.log10_p, table.total());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config = facecomp_service::ServiceConfig::new(&a.checkpoint);
    config.dataset = a.data;
    config.sidecar_dir = a.sidecar;
    config.session_dir = a.session_dir;
    config.session_capacity = a.capacity;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(facecomp_service::serve(config, a.addr))?;
    Ok(())
}
