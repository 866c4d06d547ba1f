use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::CommandFactory;
use gsfix::enhance::write_trace;
use gsfix::evalx::{behavior_trajectory, lateral_shift, run_protocol, Behavior, BehaviorParams, Report};
use gsfix::fixer::conformance::{self, ConformanceConfig};
use gsfix::fixer::serve::{serve, LocalServer};
use gsfix::fixer::{builtin_backend, Builtin, Endpoint, Fixer, OracleFixer, RemoteFixer};
use gsfix::loss::LossReport;
use gsfix::pipeline::{dump_records, genre, genre_plus, Timing};
use gsfix::raster::render;
use gsfix::scene::{CameraView, Scene};
use gsfix::sceneio::{load_poses, load_scene, save_scene, write_png};
use gsfix::synth::{default_suite, degrade, generate, SynthSpec};
use serde_json::json;

use crate::config::{resolve, Config, Resolved, FIXER_ENV};
use crate::data::{write_synthetic, Dataset};
use crate::manifest::Run;
use crate::{Cli, CliError, Command, ConfigArgs, FixerArgs, Transport};

fn args() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn configure(cfg: &ConfigArgs, fixer: Option<&FixerArgs>) -> Result<Resolved, CliError> {
    let env = std::env::var(FIXER_ENV).ok();
    let r = resolve(cfg.config.as_deref(), env, &cfg.overrides(fixer))?;
    eprintln!("# resolved configuration (defaults < file < ${FIXER_ENV} < flags)");
    eprint!("{}", r.text);
    eprintln!("# config sha256 {}", r.sha256());
    Ok(r)
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Op(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Op(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn trace_csv(trace: &[LossReport]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace).expect("writing to memory");
    buf
}

fn parse_frames(s: &str) -> Result<Range<u32>, CliError> {
    let bad = || CliError::Usage(format!("--frames expects START..END, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

fn make_fixer(cfg: &Config, data: &Dataset) -> Result<Box<dyn Fixer>, CliError> {
    if !cfg.fixer.endpoint.trim().is_empty() {
        let ep = Endpoint::parse(&cfg.fixer.endpoint).map_err(|e| CliError::Usage(e.to_string()))?;
        log::info!("fixer: remote {ep}");
        return Ok(Box::new(RemoteFixer::new(ep, cfg.fixer.client())));
    }
    log::info!("fixer: builtin {}", cfg.fixer.backend);
    match cfg.fixer.backend.as_str() {
        "oracle" => {
            let gt = data.synthetic()?.ok_or_else(|| {
                CliError::Usage(format!(
                    "the oracle fixer needs a synthetic dataset ({} has no spec.toml); use --fixer identity or --fixer-endpoint",
                    data.dir.display()
                ))
            })?;
            Ok(Box::new(Builtin::new(OracleFixer::new(Arc::new(gt)))))
        }
        name => Ok(Box::new(Builtin(builtin_backend(name).map_err(|e| CliError::Usage(e.to_string()))?))),
    }
}

fn data_inputs(data: &Dataset) -> Vec<PathBuf> {
    let mut v = vec![data.dir.join("poses.txt"), data.dir.join("points.ply")];
    let tracks = data.dir.join("tracks.gscn");
    if tracks.exists() {
        v.push(tracks);
    }
    v.extend(data.cameras.iter().map(|c| crate::data::image_path(&data.dir, c.frame_index)));
    v
}

fn timing_json(t: &Timing) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (name, d) in t.entries() {
        m.insert(format!("{name}_s"), json!(d.as_secs_f64()));
    }
    serde_json::Value::Object(m)
}

fn chunk_name(prefix: &str, frames: &Range<u32>) -> String {
    format!("{prefix}_{:04}-{:04}", frames.start, frames.end)
}

pub fn run(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Synth { out, spec, scene, cfg } => synth(&out, &spec, scene, &cfg),
        Command::Reconstruct { data, out, cfg } => reconstruct(&data, &out, &cfg),
        Command::Enhance {
            scene,
            data,
            out,
            degrade,
            frames,
            dump_artifacts,
            cfg,
            fixer,
        } => enhance(&scene, &data, &out, degrade, frames.as_deref(), dump_artifacts, &cfg, &fixer),
        Command::GenrePlus {
            data,
            out,
            dump_artifacts,
            cfg,
            fixer,
        } => genre_plus_cmd(&data, &out, dump_artifacts, &cfg, &fixer),
        Command::Render {
            scene,
            poses,
            data,
            out,
            shift,
            behavior,
            offset,
            factor,
            ramp_frames,
            start_frame,
            cfg,
        } => {
            let kind = behavior
                .as_deref()
                .map(|b| b.parse::<Behavior>().map_err(|e| CliError::Usage(e.to_string())))
                .transpose()?;
            let mut params = kind.map(BehaviorParams::defaults);
            if let Some(p) = params.as_mut() {
                p.offset = offset.unwrap_or(p.offset);
                p.factor = factor.unwrap_or(p.factor);
                p.ramp_frames = ramp_frames.unwrap_or(p.ramp_frames);
                p.start_frame = start_frame.unwrap_or(p.start_frame);
            } else if offset.or(factor).is_some() || ramp_frames.or(start_frame).is_some() {
                return Err(CliError::Usage("--offset, --factor, --ramp-frames and --start-frame need --behavior".into()));
            }
            render_cmd(&scene, poses.as_deref(), data.as_deref(), &out, shift, kind.zip(params), &cfg)
        }
        Command::Evaluate { scene, data, out, id, cfg } => evaluate(&scene, &data, &out, id, &cfg),
        Command::FixerCheck {
            backend,
            endpoint,
            expect_identity,
            timeout_s,
        } => fixer_check(backend, endpoint, expect_identity, timeout_s),
        Command::FixerServe {
            backend,
            transport,
            host,
            port,
        } => fixer_serve(&backend, transport, &host, port),
        Command::ConfigReference => {
            print!("{}", reference());
            Ok(0)
        }
    }
}

fn synth(out: &Path, specs: &[PathBuf], index: Option<usize>, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let resolved = configure(cfg, None)?;
    let mut named: Vec<(String, SynthSpec)> = Vec::new();
    let mut inputs = Vec::new();
    if specs.is_empty() {
        let suite = default_suite();
        let picked: Vec<usize> = match index {
            Some(i) if i >= suite.len() => {
                return Err(CliError::Usage(format!("--scene {i}: the bundled suite has {} scenes", suite.len())))
            }
            Some(i) => vec![i],
            None => (0..suite.len()).collect(),
        };
        for i in picked {
            named.push((format!("scene_{i:02}"), suite[i].clone()));
        }
    } else {
        for p in specs {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", p.display())))?;
            let spec = SynthSpec::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
            named.push((name, spec));
            inputs.push(p.clone());
        }
    }
    mkdir(out)?;
    let mut outputs = Vec::new();
    for (name, spec) in &named {
        let s = generate(spec)?;
        let dir = out.join(name);
        outputs.extend(write_synthetic(&dir, &s)?);
        log::info!("{}: {} Gaussians, {} frames, {} points", dir.display(), s.scene.len(), s.cameras.len(), s.points.len());
    }
    Run {
        command: "synth",
        args: args(),
        config: &resolved,
        inputs,
        outputs,
        volatile: vec![],
    }
    .write(out)?;
    Ok(0)
}

fn reconstruct(data_dir: &Path, out: &Path, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let resolved = configure(cfg, None)?;
    let c = &resolved.config;
    let data = Dataset::load(data_dir)?;
    let src = data.source_views(c.eval.input_stride, None, true);
    // Without novel views genre_plus is exactly the reconstructor; the
    // fixer is never called.
    let pcfg = gsfix::pipeline::PipelineConfig {
        novel_offsets: vec![],
        ..c.pipeline.clone()
    };
    let mut unused = Builtin::new(gsfix::fixer::IdentityFixer);
    let chunks = genre_plus(&src, &data.points, &data.tracks, data.frame_count(), &mut unused, &pcfg)?;
    mkdir(out)?;
    let mut outputs = Vec::new();
    let mut timing = Vec::new();
    for ch in &chunks {
        let name = chunk_name("chunk", &ch.frames);
        let p = out.join(format!("{name}.gscn"));
        save_scene(&p, &ch.scene)?;
        outputs.push(p);
        outputs.push(write_file(&out.join(format!("{name}_trace.csv")), trace_csv(&ch.recon_trace))?);
        log::info!("{name}: {} Gaussians in {:.1} s", ch.scene.len(), ch.recon_time.as_secs_f64());
        timing.push(json!({"frames": [ch.frames.start, ch.frames.end], "reconstruct_s": ch.recon_time.as_secs_f64()}));
    }
    let tpath = write_file(&out.join("timing.json"), serde_json::to_string_pretty(&timing).unwrap())?;
    Run {
        command: "reconstruct",
        args: args(),
        config: &resolved,
        inputs: data_inputs(&data),
        outputs,
        volatile: vec![tpath],
    }
    .write(out)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn enhance(
    scene_path: &Path,
    data_dir: &Path,
    out: &Path,
    apply_degrade: bool,
    frames: Option<&str>,
    dump: bool,
    cfg: &ConfigArgs,
    fixer_args: &FixerArgs,
) -> Result<u8, CliError> {
    let resolved = configure(cfg, Some(fixer_args))?;
    let c = &resolved.config;
    let frames = frames.map(parse_frames).transpose()?;
    if !scene_path.exists() {
        return Err(CliError::Usage(format!("scene file {} does not exist", scene_path.display())));
    }
    let mut scene = load_scene(scene_path)?;
    let data = Dataset::load(data_dir)?;
    let src = data.source_views(c.eval.input_stride, frames.as_ref(), true);
    if src.is_empty() {
        return Err(CliError::Usage("no input views in the selected frames".into()));
    }
    mkdir(out)?;
    let mut outputs = Vec::new();
    if apply_degrade {
        scene = degrade(&scene, &c.degrade)?;
        let p = out.join("degraded.gscn");
        save_scene(&p, &scene)?;
        outputs.push(p);
    }
    let mut fixer = make_fixer(c, &data)?;
    let result = genre(&scene, &src, &data.points, fixer.as_mut(), &c.pipeline)?;
    for r in result.dropped() {
        log::warn!("view {} dropped: {}", r.request.view_id, r.outcome.as_ref().unwrap_err());
    }
    let p = out.join("scene.gscn");
    save_scene(&p, &result.scene)?;
    outputs.push(p);
    outputs.push(write_file(&out.join("trace.csv"), trace_csv(&result.trace))?);
    if dump {
        let dir = out.join("artifacts");
        dump_records(&dir, &result.records)?;
        outputs.extend(artifact_files(&dir)?);
    }
    for (name, d) in result.timing.entries() {
        log::info!("{name}: {:.2} s", d.as_secs_f64());
    }
    let tpath = write_file(&out.join("timing.json"), serde_json::to_string_pretty(&timing_json(&result.timing)).unwrap())?;
    let mut inputs = vec![scene_path.to_path_buf()];
    inputs.extend(data_inputs(&data));
    Run {
        command: "enhance",
        args: args(),
        config: &resolved,
        inputs,
        outputs,
        volatile: vec![tpath],
    }
    .write(out)?;
    Ok(0)
}

fn artifact_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Op(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn genre_plus_cmd(data_dir: &Path, out: &Path, dump: bool, cfg: &ConfigArgs, fixer_args: &FixerArgs) -> Result<u8, CliError> {
    let resolved = configure(cfg, Some(fixer_args))?;
    let c = &resolved.config;
    let data = Dataset::load(data_dir)?;
    let src = data.source_views(c.eval.input_stride, None, true);
    let mut fixer = make_fixer(c, &data)?;
    let chunks = genre_plus(&src, &data.points, &data.tracks, data.frame_count(), fixer.as_mut(), &c.pipeline)?;
    mkdir(out)?;
    let mut outputs = Vec::new();
    let mut timing = Vec::new();
    for ch in &chunks {
        let name = chunk_name("chunk", &ch.frames);
        let p = out.join(format!("{name}.gscn"));
        save_scene(&p, &ch.scene)?;
        outputs.push(p);
        let p = out.join(format!("{}.gscn", chunk_name("recon", &ch.frames)));
        save_scene(&p, &ch.reconstructed)?;
        outputs.push(p);
        outputs.push(write_file(&out.join(format!("{}_trace.csv", chunk_name("recon", &ch.frames))), trace_csv(&ch.recon_trace))?);
        let mut t = json!({"frames": [ch.frames.start, ch.frames.end], "reconstruct_s": ch.recon_time.as_secs_f64()});
        if let Some(g) = &ch.genre {
            outputs.push(write_file(&out.join(format!("{name}_trace.csv")), trace_csv(&g.trace))?);
            if dump {
                let dir = out.join("artifacts").join(&name);
                dump_records(&dir, &g.records)?;
                outputs.extend(artifact_files(&dir)?);
            }
            t["stages"] = timing_json(&g.timing);
        }
        log::info!("{name}: {:.1} s total", {
            ch.recon_time.as_secs_f64()
                + ch.genre.as_ref().map_or(0.0, |g| g.timing.entries().iter().map(|(_, d)| d.as_secs_f64()).sum())
        });
        timing.push(t);
    }
    let tpath = write_file(&out.join("timing.json"), serde_json::to_string_pretty(&timing).unwrap())?;
    Run {
        command: "genre-plus",
        args: args(),
        config: &resolved,
        inputs: data_inputs(&data),
        outputs,
        volatile: vec![tpath],
    }
    .write(out)?;
    Ok(0)
}

fn render_cmd(
    scene_path: &Path,
    poses: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    shift: Option<f64>,
    behavior: Option<(Behavior, BehaviorParams)>,
    cfg: &ConfigArgs,
) -> Result<u8, CliError> {
    let resolved = configure(cfg, None)?;
    let pose_path = match (poses, data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join("poses.txt"),
        (None, None) => unreachable!("clap requires one"),
    };
    for p in [scene_path, &pose_path] {
        if !p.exists() {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    let scene = load_scene(scene_path)?;
    let mut cams = load_poses(&pose_path)?;
    if let Some((kind, params)) = behavior {
        cams = behavior_trajectory(kind, &cams, &params)?;
    }
    if let Some(d) = shift {
        cams = cams.iter().map(|c| lateral_shift(c, d)).collect::<Result<_, _>>()?;
    }
    mkdir(out)?;
    let mut outputs = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let img = render(&scene, cam)?.color;
        let p = out.join(format!("{i:04}_f{:04}.png", cam.frame_index));
        write_png(&p, &img)?;
        outputs.push(p);
    }
    log::info!("rendered {} views to {}", cams.len(), out.display());
    Run {
        command: "render",
        args: args(),
        config: &resolved,
        inputs: vec![scene_path.to_path_buf(), pose_path],
        outputs,
        volatile: vec![],
    }
    .write(out)?;
    Ok(0)
}

fn evaluate(scenes: &[PathBuf], data_dir: &Path, out: &Path, id: Option<String>, cfg: &ConfigArgs) -> Result<u8, CliError> {
    let resolved = configure(cfg, None)?;
    let c = &resolved.config;
    let data = Dataset::load(data_dir)?;
    let gt = data.ground_truth()?;
    let id = id.unwrap_or_else(|| {
        data_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });
    let ranges: Vec<Range<u32>> = if scenes.len() == 1 {
        vec![0..data.frame_count()]
    } else {
        gsfix::enhance::chunks(data.frame_count())
    };
    if ranges.len() != scenes.len() {
        return Err(CliError::Usage(format!(
            "{} scenes given for {} chunks; pass one scene per 20-frame chunk, in order",
            scenes.len(),
            ranges.len()
        )));
    }
    let mut report = Report::default();
    for (path, range) in scenes.iter().zip(&ranges) {
        if !path.exists() {
            return Err(CliError::Usage(format!("scene file {} does not exist", path.display())));
        }
        let scene: Scene = load_scene(path)?;
        let cams: Vec<CameraView> = data.cameras.iter().filter(|c| range.contains(&c.frame_index)).copied().collect();
        let inputs = c.eval.input_frames(cams.iter().map(|c| c.frame_index));
        report.extend(run_protocol(&id, &scene, &cams, &inputs, gt.as_ref(), &c.eval)?);
    }
    mkdir(out)?;
    let md = report.to_markdown();
    let outputs = vec![
        write_file(&out.join("report.csv"), report.to_csv())?,
        write_file(&out.join("report.md"), &md)?,
    ];
    print!("{md}");
    let mut inputs = scenes.to_vec();
    inputs.extend(data_inputs(&data));
    Run {
        command: "evaluate",
        args: args(),
        config: &resolved,
        inputs,
        outputs,
        volatile: vec![],
    }
    .write(out)?;
    Ok(0)
}

fn fixer_check(backend: Option<String>, endpoint: Option<String>, expect_identity: bool, timeout_s: f64) -> Result<u8, CliError> {
    if !(timeout_s.is_finite() && timeout_s > 0.0) {
        return Err(CliError::Usage("--timeout-s must be positive".into()));
    }
    let mut cfg = ConformanceConfig {
        expect_identity,
        timeout: std::time::Duration::from_secs_f64(timeout_s),
        ..ConformanceConfig::default()
    };
    let _server;
    let ep = match (backend, endpoint.or_else(|| std::env::var(FIXER_ENV).ok().filter(|s| !s.trim().is_empty()))) {
        (Some(name), _) => {
            let b = builtin_backend(&name).map_err(|e| CliError::Usage(e.to_string()))?;
            cfg.expect_identity |= name == "identity";
            let server = LocalServer::start(Arc::from(b)).map_err(|e| CliError::Op(format!("cannot start local server: {e}")))?;
            let ep = Endpoint::Tcp(server.addr().to_string());
            _server = server;
            ep
        }
        (None, Some(e)) => Endpoint::parse(&e).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "give --backend NAME, --endpoint ADDR, or set ${FIXER_ENV}"
            )))
        }
    };
    println!("fixer-check against {ep}");
    let results = conformance::run(&ep, &cfg);
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn fixer_serve(backend: &str, transport: Transport, host: &str, port: u16) -> Result<u8, CliError> {
    let b = builtin_backend(backend).map_err(|e| CliError::Usage(e.to_string()))?;
    match transport {
        Transport::Stdio => {
            let stats = serve(b.as_ref(), std::io::stdin().lock(), std::io::stdout().lock())
                .map_err(|e| CliError::Op(e.to_string()))?;
            log::info!("served {} requests, {} error frames", stats.requests, stats.errors);
        }
        Transport::Tcp => {
            let server = LocalServer::bind(&format!("{host}:{port}"), Arc::from(b))
                .map_err(|e| CliError::Op(format!("cannot listen on {host}:{port}: {e}")))?;
            println!("listening on {}", server.addr());
            std::io::stdout().flush().ok();
            server.join();
        }
    }
    Ok(0)
}

/// Flag and config-key reference, generated from the parser and the
/// default configuration.
pub fn reference() -> String {
    let mut out = String::from("# gsfix command-line reference\n\n");
    out.push_str("Generated by `gsfix config-reference`.\n\n");
    let mut cmd = Cli::command();
    out.push_str("## gsfix\n\n```text\n");
    out.push_str(&cmd.render_long_help().to_string());
    out.push_str("```\n\n");
    for sub in cmd.get_subcommands_mut() {
        out.push_str(&format!("## gsfix {}\n\n```text\n", sub.get_name()));
        out.push_str(&sub.clone().bin_name(format!("gsfix {}", sub.get_name())).render_long_help().to_string());
        out.push_str("```\n\n");
    }
    out.push_str("## Configuration keys\n\n");
    out.push_str("Every key can be set in the `--config` file or with `--set KEY=VALUE`. ");
    out.push_str(&format!("`${FIXER_ENV}` overrides `fixer.endpoint` only. Defaults:\n\n```toml\n"));
    out.push_str(&toml::to_string(&Config::default()).expect("config serializes"));
    out.push_str("```\n");
    out
}
