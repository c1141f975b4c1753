//! Multi-process data parallelism on one machine.
//!
//! The coordinator (rank 0) listens on a loopback rendezvous socket and
//! launches `devices - 1` workers. Each worker connects, announces the port
//! of its own ring listener, and receives its rank, every ring port, the
//! starting checkpoint and the training records. All ranks then form a ring
//! and run the same epoch loop; only the coordinator validates, logs and
//! fires callbacks.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::comm::{accept_with_timeout, read_bytes_frame, write_bytes_frame, CommError, Ring};
use super::fit::{Exec, Session};
use super::TrainerError;
use crate::models::{Egnn, EgnnConfig, EnergyModel};
use crate::structures::AtomicStructure;
use crate::tasks::TaskData;

/// Starts one worker that will connect to `coordinator`.
pub trait WorkerLauncher: Send + Sync {
    fn launch(&self, coordinator: SocketAddr) -> io::Result<WorkerHandle>;
}

pub enum WorkerHandle {
    Process(Child),
    Thread(JoinHandle<Result<(), TrainerError>>),
}

/// Runs `program args... --connect <addr>` for every worker.
#[derive(Debug, Clone)]
pub struct CommandLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandLauncher {
    /// The running executable's hidden `worker` subcommand.
    pub fn current_exe_worker() -> io::Result<Self> {
        Ok(CommandLauncher {
            program: std::env::current_exe()?,
            args: vec!["worker".into()],
        })
    }
}

impl WorkerLauncher for CommandLauncher {
    fn launch(&self, coordinator: SocketAddr) -> io::Result<WorkerHandle> {
        let child = Command::new(&self.program)
            .args(&self.args)
            .arg("--connect")
            .arg(coordinator.to_string())
            .stdin(std::process::Stdio::null())
            .stdout(std::process::Stdio::null())
            .spawn()?;
        Ok(WorkerHandle::Process(child))
    }
}

/// Runs workers as threads of the current process, still talking over
/// sockets. Useful for exercising the protocol without a worker binary.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadLauncher;

impl WorkerLauncher for ThreadLauncher {
    fn launch(&self, coordinator: SocketAddr) -> io::Result<WorkerHandle> {
        Ok(WorkerHandle::Thread(std::thread::spawn(move || {
            run_worker(coordinator)
        })))
    }
}

#[derive(Serialize, Deserialize)]
struct Assignment {
    rank: usize,
    world: usize,
    ports: Vec<u16>,
    timeout_s: f64,
}

/// Frames of the rendezvous exchange, in order.
const SEQ_HELLO: u32 = 0;
const SEQ_ASSIGN: u32 = 1;
const SEQ_CHECKPOINT: u32 = 2;
const SEQ_DATA: u32 = 3;

/// The coordinator's view of running workers.
pub(crate) struct Cluster {
    handles: Vec<WorkerHandle>,
}

impl Cluster {
    pub fn start(
        world: usize,
        launcher: &dyn WorkerLauncher,
        bootstrap: &Checkpoint,
        train: &[AtomicStructure],
    ) -> Result<(Cluster, Ring), TrainerError> {
        let timeout = Duration::from_secs_f64(bootstrap.trainer_config.comm_timeout_s);
        let rendezvous = TcpListener::bind("127.0.0.1:0").map_err(CommError::from)?;
        let ring_listener = TcpListener::bind("127.0.0.1:0").map_err(CommError::from)?;
        let addr = rendezvous.local_addr().map_err(CommError::from)?;
        let mut cluster = Cluster {
            handles: Vec::new(),
        };
        match cluster.connect(
            world,
            launcher,
            addr,
            &rendezvous,
            &ring_listener,
            bootstrap,
            train,
            timeout,
        ) {
            Ok(ring) => Ok((cluster, ring)),
            Err(e) => Err(cluster.abort(e)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn connect(
        &mut self,
        world: usize,
        launcher: &dyn WorkerLauncher,
        addr: SocketAddr,
        rendezvous: &TcpListener,
        ring_listener: &TcpListener,
        bootstrap: &Checkpoint,
        train: &[AtomicStructure],
        timeout: Duration,
    ) -> Result<Ring, TrainerError> {
        for _ in 1..world {
            let handle = launcher
                .launch(addr)
                .map_err(|e| TrainerError::Worker(format!("failed to launch worker: {e}")))?;
            self.handles.push(handle);
        }
        let mut ports = vec![ring_listener.local_addr().map_err(CommError::from)?.port()];
        let mut streams = Vec::new();
        for _ in 1..world {
            let mut s = accept_with_timeout(rendezvous, timeout)?;
            s.set_read_timeout(Some(timeout)).map_err(CommError::from)?;
            let hello = read_bytes_frame(&mut s, SEQ_HELLO, timeout)?;
            let port: [u8; 2] = hello
                .as_slice()
                .try_into()
                .map_err(|_| CommError::Protocol("malformed hello".into()))?;
            ports.push(u16::from_le_bytes(port));
            streams.push(s);
        }
        let ckpt = bootstrap.to_bytes();
        let records = serde_json::to_vec(train).expect("records serialize");
        for (k, s) in streams.iter_mut().enumerate() {
            let assignment = Assignment {
                rank: k + 1,
                world,
                ports: ports.clone(),
                timeout_s: timeout.as_secs_f64(),
            };
            let body = serde_json::to_vec(&assignment).expect("assignment serializes");
            write_bytes_frame(s, SEQ_ASSIGN, &body)?;
            write_bytes_frame(s, SEQ_CHECKPOINT, &ckpt)?;
            write_bytes_frame(s, SEQ_DATA, &records)?;
        }
        Ok(Ring::connect(0, world, ring_listener, &ports, timeout)?)
    }

    /// Waits for every worker and checks that each exited cleanly.
    pub fn finish(self) -> Result<(), TrainerError> {
        let mut failures = Vec::new();
        for (k, handle) in self.handles.into_iter().enumerate() {
            let rank = k + 1;
            match handle {
                WorkerHandle::Process(mut child) => match child.wait() {
                    Ok(status) if status.success() => {}
                    Ok(status) => failures.push(format!("rank {rank} exited with {status}")),
                    Err(e) => failures.push(format!("rank {rank}: {e}")),
                },
                WorkerHandle::Thread(t) => match t.join() {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => failures.push(format!("rank {rank}: {e}")),
                    Err(_) => failures.push(format!("rank {rank} panicked")),
                },
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(TrainerError::Worker(failures.join("; ")))
        }
    }

    /// Stops all workers and wraps `cause` with what is known about them.
    pub fn abort(self, cause: TrainerError) -> TrainerError {
        let mut notes = Vec::new();
        for (k, handle) in self.handles.into_iter().enumerate() {
            let rank = k + 1;
            if let WorkerHandle::Process(mut child) = handle {
                match child.try_wait() {
                    Ok(Some(status)) if !status.success() => {
                        notes.push(format!("rank {rank} exited with {status}"))
                    }
                    Ok(Some(_)) => {}
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                    }
                }
            }
            // worker threads notice the closed ring and exit on their own
        }
        match cause {
            TrainerError::Comm(e) => TrainerError::Worker(if notes.is_empty() {
                format!("lost contact with a worker: {e}")
            } else {
                format!("lost contact with a worker: {e} ({})", notes.join("; "))
            }),
            other => other,
        }
    }
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Box<dyn EnergyModel>, TrainerError> {
    match ckpt.model_kind.as_str() {
        "egnn" => {
            let config: EgnnConfig = serde_json::from_value(ckpt.model_config.clone())
                .map_err(|e| TrainerError::Checkpoint(format!("model config: {e}")))?;
            Ok(Box::new(Egnn::new(config)?))
        }
        other => Err(TrainerError::Checkpoint(format!(
            "unknown model kind '{other}'"
        ))),
    }
}

/// Rebuilds the model a checkpoint was written for.
pub fn load_model(ckpt: &Checkpoint) -> Result<Box<dyn EnergyModel>, TrainerError> {
    let model = model_from_checkpoint(ckpt)?;
    ckpt.check_model(model.as_ref())?;
    Ok(model)
}

/// Entry point of a process-ddp worker: joins the coordinator at `addr`,
/// trains its shard of every batch until the coordinator stops, then returns.
pub fn run_worker(addr: SocketAddr) -> Result<(), TrainerError> {
    let ring_listener = TcpListener::bind("127.0.0.1:0").map_err(CommError::from)?;
    let port = ring_listener.local_addr().map_err(CommError::from)?.port();
    let startup = Duration::from_secs(30);
    let mut s = TcpStream::connect_timeout(&addr, startup).map_err(CommError::from)?;
    s.set_read_timeout(Some(startup)).map_err(CommError::from)?;
    write_bytes_frame(&mut s, SEQ_HELLO, &port.to_le_bytes())?;
    let assignment: Assignment =
        serde_json::from_slice(&read_bytes_frame(&mut s, SEQ_ASSIGN, startup)?)
            .map_err(|e| CommError::Protocol(format!("bad assignment: {e}")))?;
    let ckpt = Checkpoint::from_bytes(&read_bytes_frame(&mut s, SEQ_CHECKPOINT, startup)?)?;
    let records: Vec<AtomicStructure> =
        serde_json::from_slice(&read_bytes_frame(&mut s, SEQ_DATA, startup)?)
            .map_err(|e| CommError::Protocol(format!("bad records: {e}")))?;
    drop(s);

    let model = load_model(&ckpt)?;
    let train = TaskData::new(records, ckpt.task, ckpt.graph)?;
    let timeout = Duration::from_secs_f64(assignment.timeout_s);
    let ring = Ring::connect(
        assignment.rank,
        assignment.world,
        &ring_listener,
        &assignment.ports,
        timeout,
    )?;
    let config = ckpt.trainer_config.clone();
    let mut state = ckpt.state;
    let mut session = Session {
        model: model.as_ref(),
        config: &config,
        train: &train,
        val: None,
        exec: Exec::Ring(ring),
        callbacks: Vec::new(),
    };
    session.run(&mut state)?;
    Ok(())
}
