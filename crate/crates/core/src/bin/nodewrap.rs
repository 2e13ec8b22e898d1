use std::io::{self, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use nodewrap::bus::{Broker, BrokerServer, Connector, TopicName, BROKER_URI_ENV, DEFAULT_BROKER_PORT};
use nodewrap::demo::{self, scenario, Gains, NodeOptions, DEMO_PACKAGES};
use nodewrap::launcher::{Launcher, NODE_NAME_ENV};
use nodewrap::node::{time_scale_from_env, Runtime};
use nodewrap::shell::{ApiServer, Controller, Repl, DEFAULT_CONTROL_PORT};

#[derive(Parser)]
#[command(name = "nodewrap", version, about = "Interactive node wrapping on a self-contained pub/sub bus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a broker in the foreground.
    Broker {
        #[arg(long, default_value_t = DEFAULT_BROKER_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Interactive shell plus the WebSocket control API.
    Shell {
        #[arg(long, env = BROKER_URI_ENV, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
        #[arg(long, default_value_t = DEFAULT_CONTROL_PORT)]
        control_port: u16,
        /// Do not serve the control API.
        #[arg(long)]
        no_control: bool,
        #[arg(long, default_value = "nw_shell")]
        name: String,
    },
    /// Start one packaged node and wait for it.
    Run {
        package: String,
        node: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, env = BROKER_URI_ENV, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
        broker: String,
    },
    /// Run a scripted scenario and print its report.
    Scenario {
        /// turtle-circle, kobuki-override or safety-clamp
        name: String,
        /// Use a running broker instead of an in-process one.
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        time_scale: Option<f64>,
        /// Print the JSON report instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Demo package management.
    Demo {
        #[command(subcommand)]
        cmd: DemoCmd,
    },
    /// Run a demo node process (what installed demo packages exec).
    #[command(hide = true)]
    Node(NodeArgs),
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Write the demo packages under DIR; add DIR to NW_PACKAGE_PATH.
    Install { dir: PathBuf },
}

#[derive(Args)]
struct NodeArgs {
    kind: String,
    /// EXTERNAL=INTERNAL topic alias, repeatable.
    #[arg(long = "alias")]
    aliases: Vec<String>,
    #[arg(long, env = NODE_NAME_ENV)]
    name: Option<String>,
    #[arg(long, env = BROKER_URI_ENV, default_value_t = format!("127.0.0.1:{DEFAULT_BROKER_PORT}"))]
    broker: String,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long)]
    count: Option<u64>,
    #[arg(long, default_value_t = 16)]
    payload_bytes: usize,
    #[arg(long, default_value_t = Gains::default().kv)]
    kv: f64,
    #[arg(long, default_value_t = Gains::default().kw)]
    kw: f64,
    #[arg(long, default_value_t = Gains::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = Gains::default().v_max)]
    v_max: f64,
    #[arg(long, default_value_t = Gains::default().w_max)]
    w_max: f64,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("nodewrap: {msg}");
    ExitCode::FAILURE
}

fn stop_flag() -> io::Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    Ok(stop)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Broker { port, host } => broker(&host, port),
        Cmd::Shell { broker, control_port, no_control, name } => shell(broker, control_port, no_control, &name),
        Cmd::Run { package, node, name, broker } => run(&package, &node, name, broker),
        Cmd::Scenario { name, broker, time_scale, json } => run_scenario(&name, broker, time_scale, json),
        Cmd::Demo { cmd: DemoCmd::Install { dir } } => {
            let exe = match std::env::current_exe() {
                Ok(e) => e,
                Err(e) => return fail(e),
            };
            match demo::install(&dir, &exe) {
                Ok(()) => {
                    println!("installed demo packages under {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Node(args) => node(args),
    }
}

fn broker(host: &str, port: u16) -> ExitCode {
    let stop = match stop_flag() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let mut server = match BrokerServer::bind(&format!("{host}:{port}"), Broker::new()) {
        Ok(s) => s,
        Err(e) => return fail(format!("cannot listen on {host}:{port}: {e}")),
    };
    println!("broker listening on {}", server.uri());
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    server.shutdown();
    ExitCode::SUCCESS
}

fn shell(broker: String, control_port: u16, no_control: bool, name: &str) -> ExitCode {
    let mut rt = Runtime::new(Connector::Tcp(broker.clone())).with_launcher(Launcher::from_env());
    rt.time_scale = time_scale_from_env();
    let controller = match Controller::new(rt, name) {
        Ok(c) => c,
        Err(e) => return fail(format!("broker {broker}: {}", e.message)),
    };
    let _api = if no_control {
        None
    } else {
        match ApiServer::bind(&format!("127.0.0.1:{control_port}"), controller.clone()) {
            Ok(api) => {
                eprintln!("control API on {}", api.url());
                Some(api)
            }
            Err(e) => return fail(format!("control port {control_port}: {e}")),
        }
    };
    let mut repl = Repl::new(controller.clone());
    let interactive = io::stdin().is_terminal();
    if interactive {
        repl.echo_timeout = None;
        if let Err(e) = signal_hook::flag::register(signal_hook::consts::SIGINT, repl.interrupt.clone()) {
            return fail(e);
        }
    }
    repl.run_stream(io::stdin().lock(), &mut io::stdout(), interactive);
    drop(_api);
    controller.shutdown();
    ExitCode::SUCCESS
}

fn run(package: &str, node: &str, name: Option<String>, broker: String) -> ExitCode {
    let name = name.unwrap_or_else(|| node.to_string());
    match Launcher::from_env().resolve(package, node) {
        Ok(path) => {
            let status = std::process::Command::new(&path).env(BROKER_URI_ENV, &broker).env(NODE_NAME_ENV, &name).status();
            match status {
                Ok(s) if s.success() => ExitCode::SUCCESS,
                Ok(s) => fail(format!("{} ended: {s}", path.display())),
                Err(e) => fail(format!("{}: {e}", path.display())),
            }
        }
        Err(e) => {
            // Demo nodes run in-process even when no package is installed.
            let builtin = DEMO_PACKAGES.iter().any(|(p, kinds)| *p == package && kinds.contains(&node));
            if !builtin {
                return fail(e);
            }
            let mut opts = NodeOptions::new(node, &name, Connector::Tcp(broker));
            opts.time_scale = time_scale_from_env();
            run_demo_node(&opts)
        }
    }
}

fn run_demo_node(opts: &NodeOptions) -> ExitCode {
    let stop = match stop_flag() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match demo::run_node(opts, &stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(format!("{}: {e}", opts.name)),
    }
}

fn node(a: NodeArgs) -> ExitCode {
    let name = a.name.clone().unwrap_or_else(|| a.kind.clone());
    let mut opts = NodeOptions::new(&a.kind, &name, Connector::Tcp(a.broker.clone()));
    for spec in &a.aliases {
        let parsed = spec.split_once('=').and_then(|(e, i)| Some((TopicName::parse(e).ok()?, TopicName::parse(i).ok()?)));
        match parsed {
            Some(pair) => opts.aliases.push(pair),
            None => return fail(format!("bad alias `{spec}`; expected /external=/internal")),
        }
    }
    opts.time_scale = time_scale_from_env();
    opts.rate = a.rate;
    opts.count = a.count;
    opts.payload_bytes = a.payload_bytes;
    opts.gains = Gains { kv: a.kv, kw: a.kw, epsilon: a.epsilon, v_max: a.v_max, w_max: a.w_max };
    run_demo_node(&opts)
}

fn run_scenario(name: &str, broker: Option<String>, time_scale: Option<f64>, json: bool) -> ExitCode {
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let mut opts = scenario::ScenarioOptions::new(exe);
    opts.broker = broker;
    opts.time_scale = time_scale;
    match scenario::run_scenario(name, &opts) {
        Ok(report) => {
            if json {
                println!("{}", report.json());
            } else {
                print!("{}", report.text());
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => fail(e),
    }
}
