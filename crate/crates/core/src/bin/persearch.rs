//! Command-line driver. Every subcommand reads and writes artifacts in the
//! working directory given by `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use persearch::ann::SearchMode;
use persearch::config::KeyValues;
use persearch::encoders::{EmbeddingMode, RelevanceSpace};
use persearch::error::{Error, Result};
use persearch::features::VideoFeatures;
use persearch::io::write_file;
use persearch::pipeline::abtest::{abtest_pages, AbConfig};
use persearch::pipeline::metrics::{evaluate_metrics, feedback_to_text, MetricsConfig};
use persearch::pipeline::persist::{self, load_space, load_system, save_space};
use persearch::pipeline::{build_tables, eval_requests, train_spaces, PipelineConfig, SearchRequest, SystemConfig};
use persearch::ranking::qin::QinContext;
use persearch::ranking::train::train_qin;
use persearch::retrieval::pdr::{train_pdr, PdrModel};
use persearch::retrieval::RetrieverKind;
use persearch::tensor::{load_checkpoint, save_checkpoint};
use persearch::world::{generate_world, read_logs, read_world, simulate_logs, write_logs, write_world, History, Logs, World};

#[derive(Parser)]
#[command(name = "persearch", version, about = "Personalized short-video search: simulate, train, retrieve, rank, evaluate")]
struct Cli {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "persearch-out")]
    out: PathBuf,
    /// `trained`, `oracle` or `oracle:<sigma>`.
    #[arg(long, global = true)]
    embedding: Option<EmbeddingMode>,
    /// Nearest-neighbour search: `exact` or `approx`.
    #[arg(long, global = true, default_value = "exact")]
    mode: SearchMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world.
    Generate,
    /// Simulate interaction logs over the world.
    SimulateLogs,
    /// Train the relevance and baseline text encoders.
    TrainEncoder,
    /// Train personalized dense retrieval.
    TrainPdr,
    /// Train the query-dominant interest ranker.
    TrainQin,
    /// Index the personalized video embeddings.
    BuildIndex,
    /// Build the swing and embedding similarity tables.
    BuildTables,
    /// Print one retriever's candidates for a request.
    Retrieve {
        #[arg(long)]
        user: u32,
        #[arg(long)]
        query: u32,
        #[arg(long, default_value = "pdr")]
        retriever: RetrieverKind,
    },
    /// Run a preset end to end and print the first page.
    Rank {
        #[arg(long)]
        user: u32,
        #[arg(long)]
        query: u32,
        #[arg(long, default_value = "pr2")]
        preset: String,
    },
    /// Replay held-out sessions through a preset and report metrics.
    Evaluate {
        #[arg(long, default_value = "pr2")]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        sessions: usize,
    },
    /// Paired replay of two presets over held-out sessions.
    Abtest {
        #[arg(long, default_value = "base")]
        control: String,
        #[arg(long, default_value = "pr2")]
        treatment: String,
        #[arg(long, default_value_t = 1000)]
        sessions: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

struct Ctx {
    dir: PathBuf,
    seed: u64,
    mode: SearchMode,
    kv: KeyValues,
    cfg: SystemConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read(&self, name: &str) -> Result<String> {
        std::fs::read_to_string(self.path(name))
            .map_err(|e| Error::Data(format!("cannot read {}: {e}; run the producing step first", self.path(name).display())))
    }

    fn world(&self) -> Result<World> {
        read_world(&self.read(persist::WORLD)?)
    }

    fn logs(&self) -> Result<Logs> {
        read_logs(&self.read(persist::LOGS)?)
    }

    fn space(&self) -> Result<RelevanceSpace> {
        load_space(&self.dir, persist::SPACE)
    }

    fn pipeline(&self, preset: &str) -> Result<PipelineConfig> {
        let mut p = PipelineConfig::by_name(preset)?;
        p.mode = self.mode;
        p.apply(&self.kv)?;
        Ok(p)
    }

    /// Training logs and the per-user history over every logged day.
    fn training(&self) -> Result<(World, Logs, Logs, History, u32)> {
        let world = self.world()?;
        let logs = self.logs()?;
        if logs.days < 2 {
            return Err(Error::Data("need at least two log days: one is held out".into()));
        }
        let train_end = logs.days - 1;
        let train = logs.until_day(train_end);
        let history = History::build(world.users.len(), &logs);
        Ok((world, logs, train, history, train_end))
    }
}

fn run(cli: Cli) -> Result<()> {
    let kv = match &cli.config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::default(),
    };
    let mut cfg = SystemConfig::default();
    cfg.apply(&kv)?;
    if let Some(e) = cli.embedding {
        cfg.embedding = e;
    }
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { dir: cli.out, seed: cli.seed, mode: cli.mode, kv, cfg };
    let seed = ctx.seed;
    match cli.command {
        Command::Generate => {
            let world = generate_world(&ctx.cfg.world, seed)?;
            write_file(&ctx.path(persist::WORLD), write_world(&world))?;
            println!("world\tusers={}\tvideos={}\tqueries={}", world.users.len(), world.videos.len(), world.queries.len());
        }
        Command::SimulateLogs => {
            let world = ctx.world()?;
            let logs = simulate_logs(&world, &ctx.cfg.logs, ctx.cfg.days, seed)?;
            write_file(&ctx.path(persist::LOGS), write_logs(&logs))?;
            println!("logs\tdays={}\tevents={}\tsessions={}", logs.days, logs.events.len(), logs.sessions.len());
        }
        Command::TrainEncoder => {
            let (world, _, train, _, _) = ctx.training()?;
            let spaces = train_spaces(&world, &train, &ctx.cfg, seed)?;
            if let Some(enc) = &spaces.encoder {
                save_checkpoint(&ctx.path(persist::ENCODER), &enc.to_checkpoint())?;
            }
            save_checkpoint(&ctx.path(persist::DR_ENCODER), &spaces.dr_encoder.to_checkpoint())?;
            save_space(&spaces.space, &ctx.dir, persist::SPACE)?;
            save_space(&spaces.dr_space, &ctx.dir, persist::DR_SPACE)?;
            println!("encoder\tdim={}\tmode={:?}", spaces.space.dim(), ctx.cfg.embedding);
        }
        Command::BuildTables => {
            let (_, _, train, _, train_end) = ctx.training()?;
            let space = ctx.space()?;
            let tables = build_tables(&train, &space, &ctx.cfg.qrcf, ctx.cfg.hnsw, ctx.cfg.table_mode)?;
            write_file(&ctx.path(persist::TABLES), tables.to_text())?;
            let kv = persist::system_kv(train_end, ctx.cfg.bm25, &ctx.cfg.qrcf);
            write_file(&ctx.path(persist::SYSTEM_KV), kv.to_text())?;
            println!("tables\tswing_lists={}\tembedding_lists={}", tables.swing.lists.len(), tables.embedding.lists.len());
        }
        Command::TrainPdr => {
            let (world, _, train, history, _) = ctx.training()?;
            let space = ctx.space()?;
            let feats = VideoFeatures::build(&world, &space, &train)?;
            let q = &ctx.cfg.qrcf;
            let (model, report) = train_pdr(&world, &train, &history, &space, &feats, &ctx.cfg.pdr, q.k, q.epsilon, seed)?;
            save_checkpoint(&ctx.path(persist::PDR), &model.to_checkpoint(&world))?;
            for (e, loss) in report.epoch_loss.iter().enumerate() {
                println!("pdr_epoch\t{}\t{loss}", e + 1);
            }
        }
        Command::BuildIndex => {
            let (world, _, train, _, _) = ctx.training()?;
            let space = ctx.space()?;
            let feats = VideoFeatures::build(&world, &space, &train)?;
            let model = PdrModel::from_checkpoint(&load_checkpoint(&ctx.path(persist::PDR))?)?;
            let graph = (ctx.mode == SearchMode::Approx).then_some(ctx.cfg.hnsw);
            let index = model.build_index(&feats, graph)?;
            index.save(&ctx.path(persist::PDR_INDEX))?;
            println!("index\tvideos={}\tdim={}\tgraph={}", index.len(), index.dim(), index.has_graph());
        }
        Command::TrainQin => {
            let (world, logs, train, history, train_end) = ctx.training()?;
            let space = ctx.space()?;
            let feats = VideoFeatures::build(&world, &space, &train)?;
            let qctx = QinContext { world: &world, space: &space, feats: &feats, history: &history };
            let (model, report) = train_qin(&qctx, &logs, train_end, &ctx.cfg.qin, seed)?;
            save_checkpoint(&ctx.path(persist::QIN), &model.to_checkpoint(&world))?;
            for (e, loss) in report.epoch_loss.iter().enumerate() {
                println!("qin_epoch\t{}\t{loss}", e + 1);
            }
        }
        Command::Retrieve { user, query, retriever } => {
            let sys = load_system(&ctx.dir)?;
            let req = request(&sys.logs, user, query);
            let cfg = ctx.pipeline("pr2")?;
            let set = sys.retrieve(retriever, &req, &cfg)?;
            println!("{:<6} {:>8} {:>12}", "rank", "video", "score");
            for (i, c) in set.entries.iter().enumerate() {
                println!("{:<6} {:>8} {:>12.6}", i + 1, c.video_id, c.score);
            }
            for (i, c) in set.entries.iter().enumerate() {
                println!("cand\t{retriever}\t{query}\t{user}\t{}\t{}\t{}", i + 1, c.video_id, c.score);
            }
        }
        Command::Rank { user, query, preset } => {
            let sys = load_system(&ctx.dir)?;
            let req = request(&sys.logs, user, query);
            let out = sys.run_pipeline(&ctx.pipeline(&preset)?, &req)?;
            println!("{preset}: pool {} from {} retrievers", out.pool_size, out.candidates.len());
            for (i, s) in out.page.iter().enumerate() {
                println!("page\t{query}\t{user}\t{}\t{}\t{}", i + 1, s.id, s.score);
            }
        }
        Command::Evaluate { preset, sessions } => {
            let sys = load_system(&ctx.dir)?;
            let reqs = eval_requests(&sys.logs, sys.train_end, sessions, seed);
            let pages = sys.run_all(&ctx.pipeline(&preset)?, &reqs)?;
            let (report, feedback) = evaluate_metrics(&sys.world, &pages, &MetricsConfig::default(), seed)?;
            write_file(&ctx.path(&format!("report.{preset}.txt")), report.to_text())?;
            write_file(&ctx.path(&format!("feedback.{preset}.txt")), feedback_to_text(&feedback))?;
            print!("{}", report.to_table());
        }
        Command::Abtest { control, treatment, sessions, repeats } => {
            let sys = load_system(&ctx.dir)?;
            let reqs = eval_requests(&sys.logs, sys.train_end, sessions, seed);
            let (c, t) = (ctx.pipeline(&control)?, ctx.pipeline(&treatment)?);
            let cp = sys.run_all(&c, &reqs)?;
            let tp = sys.run_all(&t, &reqs)?;
            let ab = AbConfig { repeats, ..AbConfig::default() };
            if repeats < 5 {
                return Err(Error::Config("an A/B replay needs at least 5 seeds".into()));
            }
            let report = abtest_pages(&sys, &c.name, &cp, &t.name, &tp, &ab, seed)?;
            print!("{}{}", report.to_table(), report.to_records());
        }
    }
    Ok(())
}

/// A request at the end of the logged period, after every logged watch.
fn request(logs: &Logs, user: u32, query: u32) -> SearchRequest {
    let timestamp = u64::from(logs.days) * 86_400;
    SearchRequest { session_id: u32::MAX, user_id: user, query_id: query, timestamp }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("persearch: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
