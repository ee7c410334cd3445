use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use alref_core::backends::factory::{BackendFactory, BackendSpec, BackendsConfig, MockScenarioFile};
use alref_core::config::Task;
use alref_core::types::{Fps, VideoClip};
use alref_stub_server::StubServer;
use clap::Parser;

/// Serve a scripted mock scenario over the model-server protocol.
#[derive(Debug, Parser)]
#[command(name = "alref-stub-server", version)]
struct Args {
    /// Scenario JSON with one section per backend kind.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8700")]
    addr: SocketAddr,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match serve(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn serve(args: &Args) -> Result<(), Box<dyn std::error::Error>> {
    let scenario = MockScenarioFile::load(&args.scenario)?;
    let mut cfg = BackendsConfig::uniform(&format!("mock:{}", args.scenario.display()));
    cfg.segmenter = BackendSpec::endpoint("mock:boxfill");
    if scenario.sound_events.is_none() {
        cfg.sound_events = BackendSpec::endpoint("local:spectral");
    }
    let task = if scenario.audio_tagger.is_some() { Task::Avs } else { Task::Rvos };
    let factory = BackendFactory::new(&cfg, task, std::path::Path::new("."))?;
    let placeholder = VideoClip::from_rasters("stub", Fps::default(), [image::RgbImage::new(1, 1)])?;
    let server = StubServer::bind(factory.for_sample(&placeholder, None)?, args.addr)?;
    eprintln!("serving {} on {}", args.scenario.display(), server.url());
    server.wait();
    Ok(())
}
