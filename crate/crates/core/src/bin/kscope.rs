//! `kscope`: assembler, compiler, oracle, traffic generator and simulator front end.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kscope::engine::{self, EngineConfig, GenParams, Profile, Programs};
use kscope::fix8::Fix8;
use kscope::isa::{self, ProgramImage, Target};
use kscope::nn::{self, ModelSpec, WeightsFile};
use kscope::pe::argmax;
use kscope::traffic::write_pcap;

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "kscope", version, about = "Bypass NN co-processor toolchain and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Fpe,
    Hpe,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Fpe => Target::Fpe,
            TargetArg::Hpe => Target::Hpe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Uniform,
    Iscx,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble text into a program binary.
    Asm {
        input: PathBuf,
        /// Used when the source has no `.target` line.
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print a program binary as assembly.
    Disasm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compile a model and its weights into a program binary.
    Compile {
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Overrides the model's target.
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(short, long)]
        output: PathBuf,
        /// Writes the memory layout as JSON.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Reference inference on hex-encoded input bytes.
    Oracle {
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Input bytes as hex, exactly the model's input length.
        #[arg(long)]
        input: String,
    },
    /// Write a built-in model and its deterministic weights.
    Fixture {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(nn::fixture_names()))]
        name: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Generate a synthetic pcap trace.
    GenTraffic {
        #[arg(long, default_value_t = 1000)]
        flows: usize,
        #[arg(long, value_enum, default_value = "iscx")]
        profile: ProfileArg,
        /// Packets per flow for the uniform profile.
        #[arg(long, default_value_t = 1)]
        packets: u32,
        /// Payload bytes for the uniform profile.
        #[arg(long, default_value_t = 64)]
        payload: usize,
        /// New flows per second; 0 starts all flows at once.
        #[arg(long, default_value_t = 100_000.0)]
        rate_fps: f64,
        #[arg(long, default_value_t = 1000)]
        packet_gap_ns: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        snaplen: u32,
        #[arg(short, long)]
        output: PathBuf,
        /// Writes the achieved flow and byte shares as JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Replay a trace through the co-processor.
    Run {
        #[arg(long)]
        pcap: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        report: PathBuf,
        /// Also writes a per-flow CSV table.
        #[arg(long)]
        flows_csv: Option<PathBuf>,
    },
    /// Search for the highest drop-free flow rate.
    Peak {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, default_value_t = 4096)]
        flows_per_fpe: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, default_value = "kbase", value_parser = ["kbase", "k4fpe", "k8fpe"])]
    preset: String,
    /// Overrides the preset's FPE count.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    fpes: Option<u32>,
    #[arg(long)]
    freq_hz: Option<f64>,
    #[arg(long)]
    threshold: Option<u32>,
    #[arg(long)]
    queue_depth: Option<usize>,
    #[arg(long)]
    fast: PathBuf,
    #[arg(long)]
    slow: PathBuf,
}

impl EngineArgs {
    fn config(&self) -> Res<EngineConfig> {
        let mut cfg = EngineConfig::preset(&self.preset).expect("clap restricts presets");
        if let Some(n) = self.fpes {
            cfg.fpe_count = n as usize;
            cfg.name = format!("custom-{n}FPE");
        }
        if let Some(f) = self.freq_hz {
            if !(f > 0.0 && f.is_finite()) {
                return Err(format!("bad frequency {f}").into());
            }
            cfg.freq_hz = f;
        }
        if let Some(t) = self.threshold {
            if t < 2 {
                return Err("threshold must be at least 2".into());
            }
            cfg.threshold = t;
        }
        if let Some(d) = self.queue_depth {
            cfg.queue_depth = d;
        }
        Ok(cfg)
    }

    fn programs(&self) -> Res<Programs> {
        Ok(Programs { fast: read_program(&self.fast)?, slow: read_program(&self.slow)? })
    }
}

fn read(path: &Path) -> Res<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Res<()> {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_program(path: &Path) -> Res<ProgramImage> {
    Ok(isa::decode_binary(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn load_model(model: &Path, weights: &Path) -> Res<(ModelSpec, WeightsFile)> {
    let spec = ModelSpec::from_toml(&read_text(model)?)?;
    let w = WeightsFile::from_bytes(&read(weights)?)?;
    w.check(&spec)?;
    Ok((spec, w))
}

fn parse_hex(s: &str) -> Res<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if s.len() % 2 != 0 {
        return Err("hex input has an odd number of digits".into());
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| format!("hex input: {e}").into())).collect()
}

fn execute(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Asm { input, target, output } => {
            let img = isa::assemble(&read_text(&input)?, target.map(Into::into))?;
            let diags = isa::validate(&img, &isa::PeConfig::default_for(img.target));
            if !diags.is_empty() {
                return Err(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n").into());
            }
            write(&output, isa::encode_binary(&img)?)?;
            println!("{}: {} bundles for {}", output.display(), img.bundles.len(), img.target.name());
        }
        Cmd::Disasm { input, output } => {
            let text = isa::disassemble(&read_program(&input)?);
            match output {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Compile { model, weights, target, output, layout } => {
            let (mut spec, w) = load_model(&model, &weights)?;
            if let Some(t) = target {
                spec.target = t.into();
            }
            let prog = nn::compile(&spec, &w)?;
            write(&output, isa::encode_binary(&prog.image)?)?;
            if let Some(p) = layout {
                write(&p, serde_json::to_string_pretty(&prog.layout)?)?;
            }
            println!(
                "{}: {} for {}, {} bundles, {} parameter bytes, {} predicted cycles",
                output.display(),
                spec.name,
                spec.target.name(),
                prog.image.bundles.len(),
                prog.image.param_image.len(),
                prog.predicted_cycles
            );
        }
        Cmd::Oracle { model, weights, input } => {
            let (spec, w) = load_model(&model, &weights)?;
            let bytes = parse_hex(&input)?;
            let x: Vec<Fix8> = bytes.iter().map(|&b| Fix8::from_bits(b)).collect();
            let out = nn::oracle(&spec, &w, &x)?;
            let hex: String = out.iter().map(|v| format!("{:02x}", v.bits())).collect();
            let vals: Vec<String> = out.iter().map(|v| v.decode().to_string()).collect();
            println!("output {hex}");
            println!("values {}", vals.join(" "));
            println!("label {}", argmax(&out).map_or("none".into(), |l| l.to_string()));
        }
        Cmd::Fixture { name, model, weights } => {
            let f = nn::fixture(&name).expect("clap restricts names");
            write(&model, f.spec.to_toml())?;
            write(&weights, f.weights.to_bytes())?;
            println!("{name}: {} parameter bytes", f.spec.param_bytes());
        }
        Cmd::GenTraffic { flows, profile, packets, payload, rate_fps, packet_gap_ns, seed, snaplen, output, stats } => {
            let profile = match profile {
                ProfileArg::Uniform => Profile::Uniform { packets, payload },
                ProfileArg::Iscx => Profile::IscxLike,
            };
            let params = GenParams { flows, profile, flow_rate_fps: rate_fps, packet_gap_ns, seed, snaplen };
            let (recs, st) = engine::gen_traffic(&params)?;
            write(&output, write_pcap(&recs, snaplen))?;
            if let Some(p) = stats {
                write(&p, serde_json::to_string_pretty(&st)?)?;
            }
            println!(
                "{}: {} flows, {} packets; elephants {:.2}% of flows, {:.2}% of bytes",
                output.display(),
                st.flows,
                st.packets,
                st.elephant_flow_share * 100.0,
                st.elephant_byte_share * 100.0
            );
        }
        Cmd::Run { pcap, engine: e, report, flows_csv } => {
            let cfg = e.config()?;
            let r = engine::run_trace(&cfg, &e.programs()?, &read(&pcap)?)?;
            write(&report, r.to_json())?;
            if let Some(p) = flows_csv {
                write(&p, r.flows_csv())?;
            }
            println!("{}", r.summary());
            if r.counters.faults > 0 {
                return Err(format!("{} PE faults, first: {}", r.counters.faults, r.faults[0].message).into());
            }
        }
        Cmd::Peak { engine: e, flows_per_fpe, seed, report } => {
            let cfg = e.config()?;
            let r = engine::peak_search(&cfg, &e.programs()?, flows_per_fpe, seed)?;
            if let Some(p) = report {
                let doc = serde_json::json!({ "config": cfg, "result": r });
                write(&p, serde_json::to_string_pretty(&doc)?)?;
            }
            println!("{} ({} FPE @ {:.0} MHz): peak {:.0} fps with zero drops", cfg.name, cfg.fpe_count, cfg.freq_hz / 1e6, r.peak_fps);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
