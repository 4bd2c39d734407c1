use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bevnav_core::codec::{self, ByteReader, PayloadKind, MAGIC};
use bevnav_core::env::{generate_episode, generate_world, Episode, EpisodeKind, EpisodeSet, World};
use bevnav_core::metrics::{self, EpisodeMetrics, Summary};
use bevnav_core::rng::{derive_seed, substream};
use bevnav_model::agent::{
    finetune_step, rollout, ExpertReplay, FinetuneReport, Mode, ModelPolicy, Policy, RandomWalk, Rollout, RolloutConfig,
};
use bevnav_model::checkpoint;
use bevnav_model::pretrain::{pretrain_step, PretrainReport, Sample, TaskSampler, Trainer};
use bevnav_model::state::Explorer;
use bevnav_model::{Config, Model, PseudoLabel, Schedule};
use rand::Rng;

use crate::args::{Cli, Command, Data, Global, KindArg, LabelArg, PolicyArg, PolicyArgs};
use crate::error::{CliError, Result};
use crate::io::{load_corpus, load_world, read_bytes, read_text, write_atomic};

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(usize::from(g.threads))
        .build()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenWorld { rooms } => gen_world(g, *rooms),
        Command::GenEpisodes { world, count, kind } => gen_episodes(g, world, *count, *kind),
        Command::Pretrain { data, steps, save_every } => pretrain(g, data, *steps, *save_every),
        Command::Finetune { data, checkpoint, steps, lambda, label } => {
            finetune(g, data, checkpoint, *steps, *lambda, *label)
        }
        Command::Eval { data, policy } => eval(g, data, policy),
        Command::ExportMap { data, policy, episode, step } => export_map(g, data, policy, *episode, *step),
        Command::Inspect { path } => inspect(path),
    })
}

fn config(g: &Global) -> Result<Config> {
    match &g.config {
        Some(p) => Config::from_toml(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => Ok(Config::default()),
    }
}

fn out_path(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn gen_world(g: &Global, rooms: Option<usize>) -> Result<()> {
    let mut cfg = config(g)?;
    if let Some(r) = rooms {
        cfg.world.n_rooms = r;
    }
    cfg.world.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let world = generate_world(g.seed, &cfg.world)?;
    let out = out_path(g, "world.json");
    write_atomic(&out, world.to_json().as_bytes())?;
    println!(
        "world seed {} with {} rooms, {} nodes, {} edges -> {}",
        world.seed,
        world.rooms.len(),
        world.nodes.len(),
        world.edges.len(),
        out.display()
    );
    Ok(())
}

fn gen_episodes(g: &Global, world: &Path, count: u64, kind: KindArg) -> Result<()> {
    let world = load_world(world)?;
    let episodes = (0..count)
        .into_par_iter()
        .map(|i| {
            let k = match kind {
                KindArg::Goal => EpisodeKind::Goal,
                KindArg::Fidelity => EpisodeKind::Fidelity,
                KindArg::Mixed if i % 2 == 0 => EpisodeKind::Goal,
                KindArg::Mixed => EpisodeKind::Fidelity,
            };
            let mut ep = generate_episode(&world, derive_seed(g.seed, "episode", &[i]), k)?;
            ep.id = i;
            Ok(ep)
        })
        .collect::<Result<Vec<Episode>>>()?;
    let out = out_path(g, "episodes.json");
    write_atomic(&out, EpisodeSet::new(world.seed, episodes).to_json().as_bytes())?;
    println!("{count} episodes -> {}", out.display());
    Ok(())
}

fn samples(corpus: &[(World, Vec<Episode>)]) -> Result<Vec<Sample<'_>>> {
    let s: Vec<Sample> =
        corpus.iter().flat_map(|(w, es)| es.iter().map(move |e| Sample { world: w, episode: e })).collect();
    if s.is_empty() {
        return Err(CliError::Data("no episodes to train on".into()));
    }
    Ok(s)
}

fn check_corpus(cfg: &Config, corpus: &[(World, Vec<Episode>)]) -> Result<()> {
    for (w, _) in corpus {
        let p = &w.params;
        if p.feature_dim != cfg.model.view_dim || p.num_classes != cfg.model.num_classes {
            return Err(CliError::Data(format!(
                "world {} has {}-dim features and {} classes, the model expects {} and {}",
                w.seed, p.feature_dim, p.num_classes, cfg.model.view_dim, cfg.model.num_classes
            )));
        }
    }
    Ok(())
}

/// Mean of the last `window` values.
fn tail_mean(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn pretrain(g: &Global, data: &Data, steps: Option<usize>, save_every: Option<usize>) -> Result<()> {
    let mut cfg = config(g)?;
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    let corpus = load_corpus(&data.worlds, &data.episodes)?;
    check_corpus(&cfg, &corpus)?;
    let pool = samples(&corpus)?;
    let out = out_path(g, "pretrain");
    let p = cfg.pretrain.clone();
    let sampler = TaskSampler::new(p.task_ratio)?;
    let model = Model::new(cfg.model.clone(), &mut substream(g.seed, "init", &[]))?;
    let schedule = Schedule { peak_lr: p.lr, warmup: p.warmup, total: p.steps };
    let mut trainer = Trainer::new(model, schedule, p.weight_decay, Some(cfg.finetune.clip_norm));
    let mut pick = substream(g.seed, "sample", &[]);
    let mut mask = substream(g.seed, "mask", &[]);
    let mut csv = format!("{}\n", PretrainReport::CSV_HEADER);
    let mut losses = Vec::new();
    for step in 0..p.steps {
        let batch: Vec<Sample> = (0..p.batch).map(|_| pool[pick.random_range(0..pool.len())]).collect();
        let r = pretrain_step(&mut trainer, &batch, &sampler, &p, &cfg.map, &mut mask)?;
        let _ = writeln!(csv, "{}", r.csv_row());
        if r.items > 0 {
            losses.push(r.loss);
        }
        if save_every.is_some_and(|k| k > 0 && (step + 1) % k == 0) {
            write_atomic(&out.join(format!("model-{}.ckpt", step + 1)), &checkpoint::encode(&cfg, &trainer.model))?;
        }
    }
    write_atomic(&out.join("pretrain.csv"), csv.as_bytes())?;
    write_atomic(&out.join("model.ckpt"), &checkpoint::encode(&cfg, &trainer.model))?;
    let window = 50.min(losses.len().max(1));
    let first = losses[..window.min(losses.len())].iter().sum::<f64>() / window as f64;
    println!(
        "{} steps; mean loss first {window} steps {first:.4}, last {window} steps {:.4} -> {}",
        p.steps,
        tail_mean(&losses, window),
        out.display()
    );
    Ok(())
}

fn finetune(
    g: &Global,
    data: &Data,
    ckpt: &Path,
    steps: Option<usize>,
    lambda: Option<f64>,
    label: Option<LabelArg>,
) -> Result<()> {
    let (mut cfg, model) = checkpoint::decode(&read_bytes(ckpt)?)?;
    if let Some(file) = &g.config {
        // the architecture is fixed by the checkpoint
        let f = Config::from_toml(&read_text(file)?).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
        cfg.map = f.map;
        cfg.finetune = f.finetune;
    }
    if let Some(s) = steps {
        cfg.finetune.steps = s;
    }
    if let Some(l) = lambda {
        cfg.finetune.lambda = l;
    }
    if let Some(l) = label {
        cfg.finetune.label = match l {
            LabelArg::Goal => PseudoLabel::Goal,
            LabelArg::Fidelity => PseudoLabel::Fidelity,
        };
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = load_corpus(&data.worlds, &data.episodes)?;
    check_corpus(&cfg, &corpus)?;
    let pool = samples(&corpus)?;
    let f = cfg.finetune.clone();
    let rc = RolloutConfig::new(f.max_steps, &cfg.map)?;
    let schedule = Schedule { peak_lr: f.lr, warmup: f.warmup, total: f.steps };
    let mut trainer = Trainer::new(model, schedule, f.weight_decay, Some(f.clip_norm));
    let mut pick = substream(g.seed, "sample", &[]);
    let mut act = substream(g.seed, "rollout", &[]);
    let mut csv = format!("{}\n", FinetuneReport::CSV_HEADER);
    let mut losses = Vec::with_capacity(f.steps);
    for _ in 0..f.steps {
        let batch: Vec<Sample> = (0..f.batch).map(|_| pool[pick.random_range(0..pool.len())]).collect();
        let r = finetune_step(&mut trainer, &batch, &f, &rc, &mut act)?;
        let _ = writeln!(csv, "{}", r.csv_row());
        losses.push(r.loss);
    }
    let out = out_path(g, "finetune");
    write_atomic(&out.join("finetune.csv"), csv.as_bytes())?;
    write_atomic(&out.join("model.ckpt"), &checkpoint::encode(&cfg, &trainer.model))?;
    println!("{} steps; mean loss last 50 steps {:.4} -> {}", f.steps, tail_mean(&losses, 50), out.display());
    Ok(())
}

/// Checkpointed model and map settings, or the configured defaults when the
/// policy needs no model.
fn policy_setup(g: &Global, policy: &PolicyArgs) -> Result<(Config, Option<Model>)> {
    match (policy.policy, &policy.checkpoint) {
        (PolicyArg::Model, None) => Err(CliError::Usage("the model policy needs --checkpoint".into())),
        (PolicyArg::Model, Some(p)) => {
            let (mut cfg, model) = checkpoint::decode(&read_bytes(p)?)?;
            if g.config.is_some() {
                let file = config(g)?;
                cfg.map = file.map;
                cfg.finetune.max_steps = file.finetune.max_steps;
            }
            Ok((cfg, Some(model)))
        }
        (_, _) => Ok((config(g)?, None)),
    }
}

fn make_policy<'m>(kind: PolicyArg, model: Option<&'m Model>, seed: u64) -> Box<dyn Policy + 'm> {
    match (kind, model) {
        (PolicyArg::Model, Some(m)) => Box::new(ModelPolicy::new(m, Mode::Greedy, seed)),
        (PolicyArg::Expert, _) => Box::new(ExpertReplay::default()),
        _ => Box::new(RandomWalk::new(seed)),
    }
}

fn eval(g: &Global, data: &Data, policy: &PolicyArgs) -> Result<()> {
    let (cfg, model) = policy_setup(g, policy)?;
    let corpus = load_corpus(&data.worlds, &data.episodes)?;
    if model.is_some() {
        check_corpus(&cfg, &corpus)?;
    }
    let rc = RolloutConfig::new(cfg.finetune.max_steps, &cfg.map)?;
    let jobs: Vec<(usize, &World, &Episode)> =
        corpus.iter().enumerate().flat_map(|(wi, (w, es))| es.iter().map(move |e| (wi, w, e))).collect();
    let results = jobs
        .par_iter()
        .enumerate()
        .map(|(i, (_, w, e))| {
            let mut p = make_policy(policy.policy, model.as_ref(), derive_seed(g.seed, "policy", &[i as u64]));
            let r = rollout(w, e, p.as_mut(), &rc)?;
            let m = metrics::evaluate(&r.trajectory, e, w)?;
            Ok((r, m))
        })
        .collect::<Result<Vec<(Rollout, EpisodeMetrics)>>>()?;
    let records: Vec<EpisodeMetrics> = results.iter().map(|r| r.1).collect();
    let summary = metrics::aggregate(&records)?;

    let mut per_episode = String::from("world,episode,tl,ne,success,oracle_success,spl,ndtw,sdtw\n");
    let mut logs = String::new();
    for ((wi, _, e), (r, m)) in jobs.iter().zip(&results) {
        let _ = writeln!(
            per_episode,
            "{wi},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
            e.id, m.trajectory_length, m.navigation_error, m.success, m.oracle_success, m.spl, m.ndtw, m.sdtw
        );
        for line in r.jsonl().lines() {
            let _ = writeln!(logs, "{{\"world\":{wi},\"episode\":{},\"log\":{line}}}", e.id);
        }
    }
    let out = out_path(g, "eval");
    write_atomic(&out.join("episodes.csv"), per_episode.as_bytes())?;
    write_atomic(&out.join("summary.csv"), format!("{}\n{}\n", Summary::CSV_HEADER, summary.csv_row()).as_bytes())?;
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    write_atomic(&out.join("rollouts.jsonl"), logs.as_bytes())?;
    println!(
        "{} episodes: SR {:.1} OSR {:.1} SPL {:.3} NDTW {:.3} SDTW {:.3} NE {:.2} TL {:.2} -> {}",
        summary.episodes,
        summary.sr,
        summary.osr,
        summary.spl,
        summary.ndtw,
        summary.sdtw,
        summary.ne,
        summary.tl,
        out.display()
    );
    Ok(())
}

fn export_map(g: &Global, data: &Data, policy: &PolicyArgs, index: usize, steps: usize) -> Result<()> {
    let (cfg, model) = policy_setup(g, policy)?;
    let corpus = load_corpus(&data.worlds, &data.episodes)?;
    let (world, episodes) = corpus.first().ok_or_else(|| CliError::Usage("no world given".into()))?;
    let ep = episodes
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("episode {index} out of range ({} episodes)", episodes.len())))?;
    let spec = cfg.map.spec()?;
    let mut policy_impl = make_policy(policy.policy, model.as_ref(), derive_seed(g.seed, "policy", &[index as u64]));
    policy_impl.begin(ep)?;
    let mut ex = Explorer::new(world, ep.start, ep.start_heading)?;
    let mut taken = 0;
    while taken < steps {
        let inputs = ex.inputs(&spec, cfg.map.kappa)?;
        let d = policy_impl.decide(&ex, &inputs)?;
        taken += 1;
        if d.action.is_stop() {
            break;
        }
        ex.go_to(d.action)?;
    }
    let inputs = ex.inputs(&spec, cfg.map.kappa)?;
    let map = &inputs.map;
    let out = out_path(g, "map");
    write_atomic(&out.join("map.bevn"), &codec::encode_metric_map(map))?;
    write_atomic(&out.join("cells.csv"), codec::metric_map_csv(map).as_bytes())?;
    write_atomic(&out.join("observed.pgm"), &codec::mask_pgm(&spec, map.observed()))?;
    write_atomic(&out.join("navigable.pgm"), &codec::mask_pgm(&spec, map.navigable()))?;
    write_atomic(&out.join("topo.json"), ex.topo().to_doc().to_json().as_bytes())?;
    println!(
        "after {taken} decisions at node {}: {} observed cells, {} graph nodes -> {}",
        ex.current(),
        map.observed_count(),
        ex.topo().len(),
        out.display()
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(&MAGIC) {
        let kind = bytes.get(6).copied().unwrap_or(0);
        let version = bytes.get(4..6).map(|v| u16::from_le_bytes([v[0], v[1]])).unwrap_or(0);
        println!("container version {version}, {} bytes", bytes.len());
        if ByteReader::open(&bytes, PayloadKind::Checkpoint).is_ok() {
            let (cfg, model) = checkpoint::decode(&bytes)?;
            let m = &cfg.model;
            println!("checkpoint: {} tensors, {} parameters", model.params.len(), model.params.num_scalars());
            println!(
                "model: dim {} heads {} layers text {} pano {} long {} short {} vocab {} classes {}",
                m.dim,
                m.heads,
                m.text_layers,
                m.pano_layers,
                m.long_layers,
                m.short_layers,
                m.vocab_size,
                m.num_classes
            );
            println!("map: {0}x{0} cells of {1} m, kappa {2}", cfg.map.size, cfg.map.cell_size, cfg.map.kappa);
        } else if ByteReader::open(&bytes, PayloadKind::MetricMap).is_ok() {
            let map = codec::decode_metric_map(&bytes)?;
            let s = map.spec();
            println!(
                "metric map: {}x{} cells of {} m, {} channels, {} observed",
                s.u,
                s.v,
                s.cell_size,
                map.dim(),
                map.observed_count()
            );
        } else if ByteReader::open(&bytes, PayloadKind::PointCloud).is_ok() {
            let pc = codec::decode_pointcloud(&bytes)?;
            println!("point cloud: {} points, {} channels", pc.len(), pc.dim());
        } else {
            return Err(CliError::Data(format!("unknown container kind {kind}")));
        }
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::Data("neither a container nor UTF-8 text".into()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("not JSON: {e}")))?;
    match doc.get("format").and_then(|f| f.as_str()) {
        Some(World::FORMAT) => {
            let w = World::from_json(&text)?;
            println!(
                "world: seed {} version {}, {} rooms, {} nodes, {} edges, {} views per node, vocabulary of {}",
                w.seed,
                w.version,
                w.rooms.len(),
                w.nodes.len(),
                w.edges.len(),
                w.params.views,
                w.vocab.len()
            );
        }
        Some(EpisodeSet::FORMAT) => {
            let set = EpisodeSet::from_json(&text, None)?;
            let goal = set.episodes.iter().filter(|e| e.kind == EpisodeKind::Goal).count();
            let mean_len = set.episodes.iter().map(|e| e.expert_path.len()).sum::<usize>() as f64
                / set.episodes.len().max(1) as f64;
            println!(
                "episodes: world seed {}, {} episodes ({goal} goal, {} fidelity), mean expert path {mean_len:.1} nodes",
                set.world_seed,
                set.episodes.len(),
                set.episodes.len() - goal
            );
        }
        other => return Err(CliError::Data(format!("unrecognized document format {other:?}"))),
    }
    Ok(())
}
