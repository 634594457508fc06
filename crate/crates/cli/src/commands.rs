use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use rftrace::clicksim::{make_bands, sample_clicks, CLICKS_PER_BAND};
use rftrace::flops::{count_all_nodes, count_flops};
use rftrace::metrics::{evaluate, ClickProtocol, EvalRecord, MetricsConfig};
use rftrace::segnet::{segment as run_segment, SegModel, SegmentOptions};
use rftrace::weights::blob_path_for;
use rftrace::{
    backtrace, parse_graph, pnm, verify_equivalence, zoo, BinaryMask, Click, GraphSpec, Rect,
    Shape, Tensor, WeightStore,
};

use crate::report::{emit, Context, RunManifest};

fn parse_ints(s: &str, n: usize, what: &str) -> Result<Vec<i64>> {
    let v: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{what} must be {n} comma-separated integers, got '{s}'"))?;
    if v.len() != n {
        bail!("{what} must be {n} comma-separated integers, got '{s}'");
    }
    Ok(v)
}

fn parse_click(s: &str) -> Result<Click> {
    let v = parse_ints(s, 2, "click")?;
    if v[0] < 0 || v[1] < 0 {
        bail!("click {s} is outside the image");
    }
    Ok(Click::new(v[0] as usize, v[1] as usize))
}

fn parse_shape(s: &str) -> Result<Shape> {
    let v = parse_ints(s, 3, "input shape")?;
    if v.iter().any(|&d| d <= 0) {
        bail!("input shape dimensions must be positive, got '{s}'");
    }
    Ok(Shape::new(v[0] as usize, v[1] as usize, v[2] as usize))
}

fn read_graph(path: &Path) -> Result<GraphSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_graph(&text)?)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

// Output rect from --click (input pixel, mapped to the cell covering it) or
// --rect (output frame), defaulting to the whole output.
fn out_rect(g: &GraphSpec, click: Option<&str>, rect: Option<&str>) -> Result<Rect> {
    let out = g.shapes()?[g.output()];
    let input = g.input_shape();
    if let Some(c) = click {
        let c = parse_click(c)?;
        if c.x >= input.width || c.y >= input.height {
            return Err(rftrace::Error::InvalidArgument(format!(
                "click ({}, {}) outside the {}x{} input",
                c.x, c.y, input.width, input.height
            ))
            .into());
        }
        let row = c.y * out.height / input.height;
        let col = c.x * out.width / input.width;
        return Ok(Rect::pixel(row as i64, col as i64));
    }
    if let Some(r) = rect {
        let v = parse_ints(r, 4, "rect")?;
        return Ok(Rect::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out.full_rect())
}

fn fixture(model: &str, input: Option<Shape>) -> Result<GraphSpec> {
    let g = match model {
        "toy-r18-fpn" => zoo::toy_r18_fpn(input.unwrap_or(Shape::new(3, 256, 256)))?,
        "r50-fpn-approx" => zoo::r50_fpn_approx(input.unwrap_or(Shape::new(3, 768, 1024)))?,
        "diamond" => zoo::diamond(input.unwrap_or(Shape::new(2, 32, 32)))?,
        m => match m.strip_prefix("chain-").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => zoo::chain(n, input.unwrap_or(Shape::new(3, 64, 64)), 8)?,
            _ => {
                return Err(rftrace::Error::InvalidArgument(format!(
                    "unknown model '{m}' (expected toy-r18-fpn, r50-fpn-approx, chain-N, diamond or segnet)"
                ))
                .into())
            }
        },
    };
    Ok(g)
}

pub fn gen(
    ctx: &Context,
    model: &str,
    seed: u64,
    out: &Path,
    input: Option<&str>,
    graph_only: bool,
) -> Result<ExitCode> {
    let input = input.map(parse_shape).transpose()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest::new("gen")
        .seed(seed)
        .config("model", model)
        .config("graph_only", graph_only);

    if model == "segnet" {
        let m = ctx.timed("build", || SegModel::build(input.unwrap_or(Shape::new(3, 128, 128)), seed))?;
        ctx.timed("write", || m.save(out))?;
        let flops = count_all_nodes(&m.graph)?;
        let doc = json!({
            "manifest": manifest.config("input", m.input_shape()),
            "bundle": out.join("bundle.json"),
            "nodes": m.graph.len(),
            "flops_full": flops.total_full,
        });
        emit(&doc, None)?;
        return Ok(ExitCode::SUCCESS);
    }

    let g = fixture(model, input)?;
    let mut files = BTreeMap::new();
    let graph_path = out.join("graph.json");
    write_file(&graph_path, g.to_json())?;
    files.insert("graph".to_string(), graph_path);

    let shapes = g.shapes()?;
    let mut levels = BTreeMap::new();
    if model.ends_with("-fpn") || model.ends_with("-fpn-approx") {
        for (lvl, _) in zoo::PYRAMID_LEVELS {
            let lg = g.with_output(lvl)?;
            let p = out.join(format!("graph_{lvl}.json"));
            write_file(&p, lg.to_json())?;
            levels.insert(lvl.to_string(), shapes[g.index_of(lvl).expect("level node")]);
            files.insert(format!("graph_{lvl}"), p);
        }
    }
    if !graph_only {
        let w = ctx.timed("weights", || WeightStore::random(&g, seed))?;
        let wp = out.join("weights.json");
        w.save(&wp, &blob_path_for(&wp))?;
        files.insert("weights".to_string(), wp.clone());
        files.insert("weights_blob".to_string(), blob_path_for(&wp));
    }
    let flops = count_all_nodes(&g)?;
    let doc = json!({
        "manifest": manifest.config("input", g.input_shape()),
        "files": files,
        "nodes": g.len(),
        "edges": g.edge_count(),
        "output": g.output_id(),
        "output_shape": shapes[g.output()],
        "levels": levels,
        "flops_full": flops.total_full,
    });
    emit(&doc, None)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct RegionEntry {
    rect: Rect,
    shape: Shape,
    cropped_fraction: f64,
    computed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    reused: Option<Rect>,
}

#[derive(Serialize)]
struct CropEntry {
    producer: String,
    needed: Rect,
    crop: Rect,
    margins: rftrace::Margins,
    pad_value: f32,
}

pub fn trace(
    ctx: &Context,
    graph: &Path,
    click: Option<&str>,
    rect: Option<&str>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let g = read_graph(graph)?;
    let rect_out = out_rect(&g, click, rect)?;
    let t = ctx.timed("backtrace", || backtrace(&g, rect_out))?;
    let shapes = g.shapes()?;
    let mut regions = BTreeMap::new();
    let mut plan = BTreeMap::new();
    for i in 0..g.len() {
        let Some(r) = t.region(i) else { continue };
        let s = shapes[i];
        let full = (s.height * s.width) as f64;
        let id = g.node(i).id.clone();
        regions.insert(
            id.clone(),
            RegionEntry {
                rect: r,
                shape: s,
                cropped_fraction: 1.0 - r.area() as f64 / full,
                computed: t.computes(i),
                reused: t.reused(i),
            },
        );
        let edges: Vec<CropEntry> = t
            .edges(i)
            .iter()
            .map(|e| CropEntry {
                producer: g.node(e.producer).id.clone(),
                needed: e.needed,
                crop: e.crop,
                margins: e.margins,
                pad_value: e.pad_value,
            })
            .collect();
        if !edges.is_empty() {
            plan.insert(id, edges);
        }
    }
    let mut manifest = RunManifest::new("trace").input("graph", graph);
    if let Some(c) = click {
        manifest = manifest.config("click", c);
    }
    if let Some(r) = rect {
        manifest = manifest.config("rect", r);
    }
    let doc = json!({
        "manifest": manifest,
        "output": g.output_id(),
        "out_rect": rect_out,
        "regions": regions,
        "crop_plan": plan,
        "stats": t.stats(),
    });
    emit(&doc, out)?;
    Ok(ExitCode::SUCCESS)
}

fn random_rect(rng: &mut ChaCha8Rng, s: Shape) -> Rect {
    let h = rng.gen_range(1..=s.height.min(16));
    let w = rng.gen_range(1..=s.width.min(16));
    let top = rng.gen_range(0..=s.height - h) as i64;
    let left = rng.gen_range(0..=s.width - w) as i64;
    Rect::new(top, left, top + h as i64 - 1, left + w as i64 - 1)
}

#[derive(Serialize)]
struct TrialResult {
    trial: usize,
    out_rect: Rect,
    max_abs_diff: f32,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    ctx: &Context,
    graph: &Path,
    weights: &Path,
    trials: usize,
    tol: f32,
    seed: u64,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let g = read_graph(graph)?;
    let w = WeightStore::load(weights, &blob_path_for(weights))
        .with_context(|| format!("loading weights {}", weights.display()))?;
    w.validate(&g)?;
    let out_shape = g.shapes()?[g.output()];
    let mut results: Vec<TrialResult> = ctx.timed("trials", || {
        (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(trial as u64);
                let x = Tensor::from_fn(g.input_shape(), |_, _, _| rng.gen_range(-1.0..1.0));
                let rect = random_rect(&mut rng, out_shape);
                match verify_equivalence(&g, &w, &x, rect, tol) {
                    Ok(r) => TrialResult {
                        trial,
                        out_rect: r.out_rect,
                        max_abs_diff: r.max_abs_diff,
                        pass: r.pass,
                        error: r.error,
                    },
                    Err(e) => TrialResult {
                        trial,
                        out_rect: rect,
                        max_abs_diff: f32::INFINITY,
                        pass: false,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    results.sort_by_key(|r| r.trial);
    let passed = results.iter().filter(|r| r.pass).count();
    let worst = results.iter().map(|r| r.max_abs_diff).fold(0.0f32, f32::max);
    let manifest = RunManifest::new("verify")
        .input("graph", graph)
        .input("weights", weights)
        .seed(seed)
        .config("trials", trials)
        .config("tol", tol)
        .config("jobs", jobs);
    let doc = json!({
        "manifest": manifest,
        "trials": trials,
        "passed": passed,
        "failed": trials - passed,
        "pass": passed == trials,
        "max_abs_diff": if worst.is_finite() { json!(worst) } else { json!(null) },
        "results": results,
    });
    emit(&doc, out)?;
    Ok(if passed == trials {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn flops(
    ctx: &Context,
    graph: &Path,
    click: Option<&str>,
    rect: Option<&str>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let g = read_graph(graph)?;
    let (report, rect_out) = if click.is_some() || rect.is_some() {
        let r = out_rect(&g, click, rect)?;
        let t = ctx.timed("backtrace", || backtrace(&g, r))?;
        (count_flops(&g, Some(&t))?, Some(r))
    } else {
        (count_flops(&g, None)?, None)
    };
    let mut manifest = RunManifest::new("flops").input("graph", graph);
    if let Some(c) = click {
        manifest = manifest.config("click", c);
    }
    if let Some(r) = rect {
        manifest = manifest.config("rect", r);
    }
    let doc = json!({
        "manifest": manifest,
        "out_rect": rect_out,
        "total_full": report.total_full,
        "total_traced": report.total_traced,
        "savings_ratio": report.savings_ratio,
        "per_node": report.per_node,
    });
    emit(&doc, out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Deserialize)]
struct IndexEntry {
    file: String,
    #[serde(default)]
    category: Option<String>,
}

struct Instance {
    path: PathBuf,
    file: String,
    category: Option<String>,
}

/// `index.json` when present, otherwise every `*.pgm` keyed by file stem.
fn load_instances(dir: &Path) -> Result<BTreeMap<String, Instance>> {
    let index = dir.join("index.json");
    let mut out = BTreeMap::new();
    if index.exists() {
        let text = std::fs::read_to_string(&index).with_context(|| format!("reading {}", index.display()))?;
        let entries: BTreeMap<String, IndexEntry> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", index.display()))?;
        for (id, e) in entries {
            out.insert(
                id,
                Instance {
                    path: dir.join(&e.file),
                    file: e.file,
                    category: e.category,
                },
            );
        }
    } else {
        let rd = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        for entry in rd {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let file = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(
                stem,
                Instance {
                    path: p,
                    file,
                    category: None,
                },
            );
        }
    }
    if out.is_empty() {
        bail!("no instance masks found in {}", dir.display());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClickRow {
    instance_id: String,
    band: usize,
    x: usize,
    y: usize,
}

pub fn clicks(ctx: &Context, masks: &Path, seed: u64, out: &Path) -> Result<ExitCode> {
    let instances = load_instances(masks)?;
    let mut rows = Vec::new();
    ctx.timed("sample", || -> Result<()> {
        for (stream, (id, inst)) in instances.iter().enumerate() {
            let m = pnm::read_mask(&inst.path).with_context(|| format!("reading {}", inst.path.display()))?;
            let bands = make_bands(&m).with_context(|| format!("instance '{id}'"))?;
            for c in sample_clicks(&bands, CLICKS_PER_BAND, seed, stream as u64)? {
                rows.push(ClickRow {
                    instance_id: id.clone(),
                    band: c.band,
                    x: c.x,
                    y: c.y,
                });
            }
        }
        Ok(())
    })?;
    write_file(out, serde_json::to_string_pretty(&rows)? + "\n")?;
    let manifest = RunManifest::new("clicks")
        .input("masks", masks)
        .seed(seed)
        .config("clicks_per_band", CLICKS_PER_BAND);
    let doc = json!({
        "manifest": manifest,
        "out": out,
        "instances": instances.len(),
        "clicks": rows.len(),
    });
    emit(&doc, None)?;
    Ok(ExitCode::SUCCESS)
}

/// Prediction for click `j` of an instance: `{id}_{j}.pgm`, else one
/// prediction per instance under the ground-truth file name.
fn pred_path(preds: &Path, id: &str, j: usize, inst: &Instance) -> Result<PathBuf> {
    let per_click = preds.join(format!("{id}_{j}.pgm"));
    if per_click.exists() {
        return Ok(per_click);
    }
    let shared = preds.join(&inst.file);
    if shared.exists() {
        return Ok(shared);
    }
    Err(anyhow!(
        "no prediction for instance '{id}' click {j} (looked for {} and {})",
        per_click.display(),
        shared.display()
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ctx: &Context,
    preds: &Path,
    gts: &Path,
    clicks: &Path,
    beta: f64,
    protocol: &str,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = MetricsConfig::new(beta)?;
    let instances = load_instances(gts)?;
    let text = std::fs::read_to_string(clicks).with_context(|| format!("reading {}", clicks.display()))?;
    let rows: Vec<ClickRow> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", clicks.display()))?;
    let mut by_instance: BTreeMap<&str, Vec<&ClickRow>> = BTreeMap::new();
    for r in &rows {
        if !instances.contains_key(&r.instance_id) {
            bail!("click refers to unknown instance '{}'", r.instance_id);
        }
        by_instance.entry(&r.instance_id).or_default().push(r);
    }
    let work: Vec<(&str, Vec<&ClickRow>)> = by_instance.into_iter().collect();

    // Each instance yields its records and whether its clicks cover every
    // ground-truth pixel exactly once.
    let per_instance: Vec<(Vec<EvalRecord>, bool)> = ctx.timed("score", || {
        work.par_iter()
            .map(|(id, cl)| -> Result<(Vec<EvalRecord>, bool)> {
                let inst = &instances[*id];
                let gt = pnm::read_mask(&inst.path).with_context(|| format!("reading {}", inst.path.display()))?;
                let mut recs = Vec::with_capacity(cl.len());
                let mut seen = BinaryMask::new(gt.height(), gt.width());
                let mut exhaustive = cl.len() == gt.area();
                for (j, c) in cl.iter().enumerate() {
                    let click = Click::new(c.x, c.y);
                    if c.x >= gt.width() || c.y >= gt.height() {
                        bail!("click ({}, {}) of '{id}' is outside its mask", c.x, c.y);
                    }
                    if !gt.contains(click) || seen.get(c.y, c.x) {
                        exhaustive = false;
                    }
                    seen.set(c.y, c.x, true);
                    let p = pred_path(preds, id, j, inst)?;
                    let pred = pnm::read_mask(&p).with_context(|| format!("reading {}", p.display()))?;
                    let mut r = EvalRecord::new(*id, j, &pred, &gt)
                        .with_context(|| format!("prediction {}", p.display()))?
                        .with_band(c.band);
                    if let Some(cat) = &inst.category {
                        r = r.with_category(cat.clone());
                    }
                    recs.push(r);
                }
                Ok((recs, exhaustive))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let all_exhaustive = per_instance.iter().all(|(_, e)| *e);
    let records: Vec<EvalRecord> = per_instance.into_iter().flat_map(|(r, _)| r).collect();
    let protocol = match protocol {
        "auto" if all_exhaustive => ClickProtocol::Exhaustive,
        "auto" | "sampled" => ClickProtocol::Sampled,
        "exhaustive" => ClickProtocol::Exhaustive,
        p => {
            return Err(rftrace::Error::InvalidArgument(format!(
                "unknown protocol '{p}' (expected auto, exhaustive or sampled)"
            ))
            .into())
        }
    };
    let report = evaluate(&records, cfg, protocol)?;
    let manifest = RunManifest::new("eval")
        .input("preds", preds)
        .input("gts", gts)
        .input("clicks", clicks)
        .config("beta", beta)
        .config("protocol", protocol)
        .config("jobs", jobs);
    let mut doc = serde_json::to_value(&report)?;
    doc["manifest"] = serde_json::to_value(manifest)?;
    emit(&doc, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn segment(
    ctx: &Context,
    model: &Path,
    image: &Path,
    click: &str,
    out: &Path,
    level: Option<&str>,
    diagnostics: Option<&Path>,
) -> Result<ExitCode> {
    let c = parse_click(click)?;
    let m = ctx.timed("load", || SegModel::load(model))
        .with_context(|| format!("loading model bundle {}", model.display()))?;
    let img = pnm::read(image).with_context(|| format!("reading {}", image.display()))?;
    let mut x = pnm::to_tensor(&img)?;
    let want = m.input_shape().channels;
    if x.channels() == 1 && want != 1 {
        let g = x;
        x = Tensor::from_fn(Shape::new(want, g.height(), g.width()), |_, y, xx| g.get(0, y, xx));
    }
    if c.x >= x.width() || c.y >= x.height() {
        return Err(rftrace::Error::InvalidArgument(format!(
            "click ({}, {}) outside the {}x{} image",
            c.x,
            c.y,
            x.width(),
            x.height()
        ))
        .into());
    }
    let m = m.for_image(x.height(), x.width())?;
    let forced = level
        .map(|l| {
            m.levels
                .iter()
                .position(|li| li.name.eq_ignore_ascii_case(l))
                .ok_or_else(|| {
                    let names: Vec<&str> = m.levels.iter().map(|l| l.name.as_str()).collect();
                    rftrace::Error::InvalidArgument(format!("unknown level '{l}' (have {})", names.join(", ")))
                })
        })
        .transpose()?;
    let res = ctx.timed("segment", || run_segment(&m, &x, c, SegmentOptions { level: forced }))?;
    pnm::write_mask(out, &res.mask).with_context(|| format!("writing {}", out.display()))?;
    let diag_path = diagnostics.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("json"));
    let manifest = RunManifest::new("segment")
        .input("model", model)
        .input("image", image)
        .config("click", click)
        .config("level", level);
    let doc = json!({
        "manifest": &manifest,
        "mask": out,
        "diagnostics": res.diagnostics,
    });
    emit(&doc, Some(&diag_path))?;
    emit(
        &json!({
            "manifest": manifest,
            "mask": out,
            "diagnostics": diag_path,
            "level": res.diagnostics.level,
            "mask_area": res.diagnostics.mask_area,
            "savings_ratio": res.diagnostics.flops.savings_ratio,
        }),
        None,
    )?;
    Ok(ExitCode::SUCCESS)
}
