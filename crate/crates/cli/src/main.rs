//! `wr`: command-line driver for the writer retrieval pipeline.
//!
//! Stages exchange files only: a manifest with images, WRDESC descriptor
//! files, parameter files for codebook, NetVLAD and whitening, and CSV
//! reports. Every output records the config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use wr_core::aggregation::GlobalDescriptor;
use wr_core::config::{ExperimentKind, Granularity, QueryMode, RunConfig};
use wr_core::corpus::{
    generate_synthetic_corpus, BinaryImage, Corpus, DatasetManifest, EntityId, Level, ManifestEntry, SynthConfig,
};
use wr_core::descriptors::{load_external_descriptors, to_wrdesc, LocalDescriptorSet};
use wr_core::experiments::{fit_codebook, fit_encoder, fit_train_whitening, DescriptorSource, FittedEncoder, Workbench};
use wr_core::persist::{
    globals_from_wrdesc, globals_to_wrdesc, load_codebook, load_netvlad, load_whitening, save_codebook, save_netvlad,
    save_whitening, Header,
};
use wr_core::retrieval::{evaluate, rank, write_ranked_lists, DEFAULT_TOP_X};
use wr_core::sampling::{extract_patches, write_keypoints};
use wr_core::wrdesc::write_patches;
use wr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "wr", version, about = "Writer retrieval on handwriting images")]
struct Cli {
    /// Global seed; falls back to WR_SEED, then to the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file with `[section]` and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one config key, e.g. `--set codebook.n_clusters=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// WRDESC file of local descriptors to use instead of RootSIFT.
    #[arg(long)]
    descriptors: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Artifacts {
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// NetVLAD parameters; without them the codebook encodes with VLAD.
    #[arg(long)]
    netvlad: Option<PathBuf>,
    #[arg(long)]
    whitening: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus (manifest.tsv and images/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        writers: usize,
        #[arg(long, default_value_t = 10)]
        train_writers: usize,
        #[arg(long, default_value_t = 5)]
        pages: usize,
        #[arg(long, default_value_t = 8)]
        lines: usize,
        #[arg(long, default_value_t = 6)]
        words: usize,
    },
    /// Otsu-binarize every entity and write a manifest of binary images.
    Binarize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Budgeted contour keypoints per entity, optionally with a patch dump.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write 32×32 patches to `patches.wrpatch`.
        #[arg(long)]
        patches: bool,
    },
    /// RootSIFT descriptors at budgeted contour keypoints, as WRDESC.
    Describe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means codebook on the training split.
    Codebook {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train NetVLAD parameters initialized from a codebook.
    TrainNetvlad {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA whitening on training lines.
    Whiten {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        netvlad: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Global descriptors of the test split, as WRDESC.
    Encode {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long, default_value = "page")]
        level: Granularity,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-out cosine ranking of global descriptors.
    Rank {
        #[arg(long)]
        globals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP and Top-x of global descriptors.
    Evaluate {
        #[arg(long)]
        globals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment protocol and write its report.
    Experiment {
        kind: ExperimentKind,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        artifacts: Artifacts,
        /// Lines per merged entity.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        query_mode: Option<QueryMode>,
        #[arg(long)]
        word: Option<String>,
        #[arg(long)]
        granularity: Option<Granularity>,
        /// Feature budget per line (or word).
        #[arg(long)]
        features: Option<usize>,
        /// Comma-separated budgets for a sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Configuration problems are usage errors; everything else is a data error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(require(p)?)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    cfg.seed_from_env()?;
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli)?;
    if let Command::Experiment {
        kind,
        n,
        query_mode,
        word,
        granularity,
        features,
        sweep,
        ..
    } = &cli.command
    {
        let e = &mut cfg.experiment;
        e.kind = *kind;
        e.merge_n = n.or(e.merge_n);
        e.query_mode = query_mode.unwrap_or(e.query_mode);
        e.word_filter = word.clone().or(e.word_filter.take());
        e.granularity = granularity.unwrap_or(e.granularity);
        e.features_per_unit = features.or(e.features_per_unit);
        if let Some(s) = sweep {
            e.sweep = s.clone();
        }
    }
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Synth {
            out,
            writers,
            train_writers,
            pages,
            lines,
            words,
        } => synth(&cfg, &out, writers, train_writers, pages, lines, words),
        Command::Binarize { manifest, out } => binarize_cmd(&cfg, &manifest, &out),
        Command::Sample { manifest, out, patches } => sample(&cfg, &manifest, &out, patches),
        Command::Describe { manifest, out } => describe_cmd(&cfg, &manifest, &out),
        Command::Codebook { inputs, out } => {
            let data = Data::load(&cfg, &inputs)?;
            let cb = fit_codebook(&data.source(&cfg), &cfg.pipeline)?;
            save_codebook(&out, &cb, &header(&cfg))?;
            println!("codebook: {} clusters of dim {} -> {}", cb.n_clusters(), cb.dim(), out.display());
            Ok(())
        }
        Command::TrainNetvlad { inputs, codebook, out } => {
            cfg.pipeline.encoder = wr_core::config::EncoderKind::NetVlad;
            let data = Data::load(&cfg, &inputs)?;
            let (cb, _) = load_codebook::<f64>(require(&codebook)?)?;
            let FittedEncoder::NetVlad(p) = fit_encoder(&data.source(&cfg), &cfg.pipeline, &cb)? else {
                unreachable!("encoder kind set above");
            };
            save_netvlad(&out, &p, &header(&cfg))?;
            println!("netvlad: {} clusters -> {}", p.n_clusters, out.display());
            Ok(())
        }
        Command::Whiten {
            inputs,
            codebook,
            netvlad,
            out,
        } => {
            let data = Data::load(&cfg, &inputs)?;
            let (_, enc) = load_encoder(&mut cfg, &codebook, netvlad.as_deref())?;
            let w = fit_train_whitening(&data.source(&cfg), &cfg.pipeline, &enc)?;
            save_whitening(&out, &w, &header(&cfg))?;
            println!("whitening: {} -> {} dims -> {}", w.in_dim, w.out_dim, out.display());
            Ok(())
        }
        Command::Encode {
            inputs,
            artifacts,
            level,
            out,
        } => {
            let data = Data::load(&cfg, &inputs)?;
            let wb = data.workbench(&mut cfg, &artifacts)?;
            let globals = match level {
                Granularity::Page => wb.page_globals(cfg.pipeline.line_budget)?,
                Granularity::Line => wb.line_globals(cfg.pipeline.line_budget)?,
                Granularity::Word => wb.word_globals(cfg.pipeline.word_budget)?.0,
            };
            globals_to_wrdesc(&globals)?.save(&out)?;
            write_meta(&cfg, &out)?;
            println!("encoded {} {level} entities -> {}", globals.len(), out.display());
            Ok(())
        }
        Command::Rank { globals, out } => {
            let g = load_globals(&globals)?;
            let lists = g.par_iter().map(|q| rank(q, &g)).collect::<Result<Vec<_>>>()?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            writeln!(w, "# config-hash {} seed {}", cfg.hash(), cfg.pipeline.seed)?;
            writeln!(w, "# query rank item score same-writer")?;
            write_ranked_lists(&mut w, &lists)?;
            w.flush()?;
            Ok(())
        }
        Command::Evaluate { globals, out } => {
            let g = load_globals(&globals)?;
            let eval = evaluate(&g, &DEFAULT_TOP_X)?;
            let gran = g.first().map_or("page".to_string(), |d| level_name(d.entity.level()).to_string());
            let hash = cfg.hash();
            fs::create_dir_all(&out)?;
            let mut w = BufWriter::new(fs::File::create(out.join("evaluation.csv"))?);
            writeln!(w, "metric,granularity,config-hash,value")?;
            writeln!(w, "seed,{gran},{hash},{}", cfg.pipeline.seed)?;
            writeln!(w, "mAP,{gran},{hash},{}", eval.map)?;
            for (x, v) in &eval.top_x {
                writeln!(w, "top-{x},{gran},{hash},{v}")?;
            }
            writeln!(w, "queries,{gran},{hash},{}", eval.per_query_ap.len())?;
            w.flush()?;
            let mut w = BufWriter::new(fs::File::create(out.join("per_query.csv"))?);
            writeln!(w, "query,config-hash,ap")?;
            for (q, ap) in &eval.per_query_ap {
                writeln!(w, "{q},{hash},{ap}")?;
            }
            w.flush()?;
            println!("mAP {:.2} over {} queries", eval.map * 100.0, eval.per_query_ap.len());
            Ok(())
        }
        Command::Experiment {
            inputs, artifacts, out, ..
        } => {
            let data = Data::load(&cfg, &inputs)?;
            let wb = data.workbench(&mut cfg, &artifacts)?;
            let report = wb.run(&cfg.experiment)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("wr-out"));
            report.save(&dir)?;
            print!("{}", report.summary());
            Ok(())
        }
    }
}

/// Fails with the offending path when an input file is missing.
fn require(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: no such file", path.display())).into())
    }
}

fn header(cfg: &RunConfig) -> Header {
    let mut h = Header::new();
    h.insert("config-hash".into(), cfg.hash());
    h.insert("seed".into(), cfg.pipeline.seed.to_string());
    h
}

/// Config hash and seed next to a binary artifact, as `<file>.meta`.
fn write_meta(cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    fs::write(
        PathBuf::from(name),
        format!("config-hash {}\nseed {}\n", cfg.hash(), cfg.pipeline.seed),
    )?;
    Ok(())
}

fn level_name(l: Level) -> &'static str {
    match l {
        Level::Page => "page",
        Level::Line => "line",
        Level::Word => "word",
    }
}

fn load_globals(path: &Path) -> Result<Vec<GlobalDescriptor<f64>>> {
    globals_from_wrdesc(&wr_core::wrdesc::WrDesc::load(require(path)?)?)
}

fn load_encoder(cfg: &mut RunConfig, codebook: &Path, netvlad: Option<&Path>) -> Result<(wr_core::Codebook, FittedEncoder)> {
    let (cb, _) = load_codebook::<f64>(require(codebook)?)?;
    let enc = match netvlad {
        Some(p) => {
            cfg.pipeline.encoder = wr_core::config::EncoderKind::NetVlad;
            FittedEncoder::NetVlad(load_netvlad::<f64>(require(p)?)?.0)
        }
        None => FittedEncoder::Vlad(cb.clone()),
    };
    Ok((cb, enc))
}

/// Corpus and optional external descriptors named by flags or config.
struct Data {
    corpus: Corpus,
    external: Option<BTreeMap<EntityId, LocalDescriptorSet<f64>>>,
}

impl Data {
    fn load(cfg: &RunConfig, inputs: &Inputs) -> Result<Self> {
        let manifest = inputs
            .manifest
            .clone()
            .or_else(|| cfg.manifest.clone())
            .ok_or_else(|| Error::InvalidConfig("no manifest given (--manifest or corpus.manifest)".into()))?;
        match inputs.descriptors.clone().or_else(|| cfg.external_descriptors.clone()) {
            Some(d) => {
                // external descriptors need only the entity structure
                let m = DatasetManifest::load(require(&manifest)?)?;
                let external = load_external_descriptors(require(&d)?, &m)?;
                Ok(Self {
                    corpus: Corpus::manifest_only(m),
                    external: Some(external),
                })
            }
            None => Ok(Self {
                corpus: Corpus::load(require(&manifest)?)?,
                external: None,
            }),
        }
    }

    fn source<'a>(&'a self, cfg: &RunConfig) -> DescriptorSource<'a> {
        DescriptorSource::new(&self.corpus, self.external.as_ref(), cfg.pipeline.seed)
    }

    /// Workbench from saved artifacts when a codebook is given, otherwise
    /// fitted from scratch.
    fn workbench<'a>(&'a self, cfg: &mut RunConfig, a: &Artifacts) -> Result<Workbench<'a>> {
        match &a.codebook {
            None => Workbench::fit(&self.corpus, self.external.as_ref(), cfg.pipeline.clone()),
            Some(cb_path) => {
                let (cb, enc) = load_encoder(cfg, cb_path, a.netvlad.as_deref())?;
                let w = a.whitening.as_deref().map(|p| load_whitening::<f64>(require(p)?)).transpose()?.map(|(w, _)| w);
                cfg.pipeline.whiten = w.is_some();
                Workbench::from_parts(&self.corpus, self.external.as_ref(), cfg.pipeline.clone(), cb, enc, w)
            }
        }
    }
}

fn synth(cfg: &RunConfig, out: &Path, writers: usize, train_writers: usize, pages: usize, lines: usize, words: usize) -> Result<()> {
    let sc = SynthConfig {
        writers,
        train_writers,
        pages_per_writer: pages,
        lines_per_page: lines,
        words_per_line: words,
        seed: cfg.pipeline.seed,
        ..SynthConfig::default()
    };
    let s = generate_synthetic_corpus(&sc)?;
    s.write_to(out)?;
    fs::write(
        out.join("synth.meta"),
        format!(
            "seed {}\nwriters {writers}\ntrain_writers {train_writers}\npages {pages}\nlines {lines}\nwords {words}\nsha256 {}\n",
            cfg.pipeline.seed,
            s.digest()
        ),
    )?;
    println!("{} entities -> {}", s.manifest.len(), out.display());
    Ok(())
}

fn binarize_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::load(require(manifest)?)?;
    fs::create_dir_all(out.join("images"))?;
    let entries: Vec<ManifestEntry> = corpus.manifest().entries().to_vec();
    entries.par_iter().try_for_each(|e| {
        let img: &BinaryImage = corpus.image(&e.id).expect("loaded with the corpus");
        img.save_png(&out.join("images").join(format!("{}.png", e.id)))
    })?;
    let binary = entries
        .into_iter()
        .map(|e| ManifestEntry {
            path: format!("images/{}.png", e.id),
            crop: None,
            ..e
        })
        .collect();
    DatasetManifest::new(binary)?.save(&out.join("manifest.tsv"))?;
    write_meta(cfg, &out.join("manifest.tsv"))?;
    Ok(())
}

/// Budget of an entity by level: words use the word budget, all else the line budget.
fn budget_for(cfg: &RunConfig, id: &EntityId) -> usize {
    match id.level() {
        Level::Word => cfg.pipeline.word_budget,
        _ => cfg.pipeline.line_budget,
    }
}

fn sample(cfg: &RunConfig, manifest: &Path, out: &Path, patches: bool) -> Result<()> {
    let corpus = Corpus::load(require(manifest)?)?;
    let src = DescriptorSource::new(&corpus, None, cfg.pipeline.seed);
    let ids: Vec<EntityId> = corpus.manifest().entries().iter().map(|e| e.id.clone()).collect();
    let kps: Vec<_> = ids.par_iter().map(|id| src.keypoints(id, budget_for(cfg, id))).collect();
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(fs::File::create(out.join("keypoints.txt"))?);
    writeln!(w, "# config-hash {} seed {}", cfg.hash(), cfg.pipeline.seed)?;
    for (id, k) in ids.iter().zip(&kps) {
        write_keypoints(&mut w, id, k)?;
    }
    w.flush()?;
    if patches {
        let mut all = Vec::new();
        for (id, k) in ids.iter().zip(&kps) {
            let img = corpus.image(id).expect("loaded with the corpus");
            all.extend(extract_patches(img, k).into_iter().map(|p| (id.to_string(), p)));
        }
        let path = out.join("patches.wrpatch");
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write_patches(&mut w, &all)?;
        w.flush()?;
        write_meta(cfg, &path)?;
    }
    Ok(())
}

/// Entities that carry descriptors: lines, words, and pages without lines.
fn described_entities(corpus: &Corpus) -> Vec<EntityId> {
    let m = corpus.manifest();
    let has_lines: std::collections::HashSet<EntityId> = m
        .entries()
        .iter()
        .filter(|e| e.id.level() == Level::Line)
        .map(|e| e.id.page_id())
        .collect();
    m.entries()
        .iter()
        .map(|e| e.id.clone())
        .filter(|id| id.level() != Level::Page || !has_lines.contains(id))
        .collect()
}

fn describe_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::load(require(manifest)?)?;
    let src = DescriptorSource::new(&corpus, None, cfg.pipeline.seed);
    let ids = described_entities(&corpus);
    let sets: BTreeMap<EntityId, LocalDescriptorSet<f64>> = ids
        .par_iter()
        .map(|id| (id.clone(), src.descriptors(id, budget_for(cfg, id))))
        .collect();
    let d = to_wrdesc(&sets, wr_core::descriptors::SIFT_DIM)?;
    d.save(out)?;
    write_meta(cfg, out)?;
    println!("{} descriptors for {} entities -> {}", d.count(), sets.len(), out.display());
    Ok(())
}
