//! Real-time WebSocket bridge between teleoperation clients and the
//! simulator.
//!
//! The simulator runs on its own task, ticking against the wall clock
//! and broadcasting snapshots at `snapshot_rate`. Client commands reach
//! it through a bounded queue whose senders wait when it is full, so
//! commands are never dropped; snapshot and event broadcasts drop the
//! oldest messages for clients that fall behind. The first client to
//! connect controls the hand, later ones observe.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use futures_util::{SinkExt, StreamExt};
use keyhand_core::session::{CommandSource, Record, SessionWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::protocol::CloseFrame;
use tokio_tungstenite::tungstenite::Message;

use crate::config::RunConfig;
use crate::sim::Simulator;
use crate::ui::{
    ClientMessage, ErrorCode, Role, ServerMessage, UiCommand, UiEvent, CLOSE_PROTOCOL_VIOLATION,
    UI_PROTOCOL_VERSION,
};

const COMMAND_QUEUE: usize = 256;
const BROADCAST_QUEUE: usize = 64;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Session log destination.
    pub record: Option<PathBuf>,
    pub snapshot_rate: f64,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            addr: ([127, 0, 0, 1], 8765).into(),
            record: None,
            snapshot_rate: 20.0,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServeSummary {
    pub ticks: u64,
    pub commands: u64,
    pub clients: u64,
}

struct Pending {
    id: Option<u64>,
    command: UiCommand,
    reply: mpsc::UnboundedSender<ServerMessage>,
}

struct Shared {
    hello: Mutex<ServerMessage>,
    controller: Mutex<Option<u64>>,
    next_client: AtomicU64,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    sim_task: JoinHandle<anyhow::Result<ServeSummary>>,
    accept_task: JoinHandle<u64>,
}

impl ServerHandle {
    pub async fn shutdown(self) -> anyhow::Result<ServeSummary> {
        let _ = self.shutdown.send(true);
        let clients = self.accept_task.await.unwrap_or(0);
        let mut summary = self.sim_task.await.context("simulation task panicked")??;
        summary.clients = clients;
        Ok(summary)
    }
}

/// Boots the simulator (as fast as possible), then starts serving.
pub async fn start(
    config: RunConfig,
    seed: u64,
    opts: ServeOptions,
) -> anyhow::Result<ServerHandle> {
    anyhow::ensure!(
        opts.snapshot_rate > 0.0 && opts.speed > 0.0,
        "snapshot rate and speed must be positive"
    );
    let mut sim = Simulator::new(config, seed)?;
    let mut header = sim.header();
    header.wall_clock = Some(crate::wall_clock_now());
    sim.boot()?;

    let mut writer = match &opts.record {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            Some(SessionWriter::new(std::io::BufWriter::new(file), &header)?)
        }
        None => None,
    };
    if let Some(w) = writer.as_mut() {
        for r in sim.take_records() {
            w.write(&r)?;
        }
    } else {
        sim.take_records();
    }

    let listener = TcpListener::bind(opts.addr)
        .await
        .with_context(|| format!("binding {}", opts.addr))?;
    let addr = listener.local_addr()?;

    let shared = Arc::new(Shared {
        hello: Mutex::new(hello(&sim, opts.snapshot_rate, Role::Observer)),
        controller: Mutex::new(None),
        next_client: AtomicU64::new(0),
    });
    let (cmd_tx, cmd_rx) = mpsc::channel::<Pending>(COMMAND_QUEUE);
    let (out_tx, _) = broadcast::channel::<Arc<String>>(BROADCAST_QUEUE);
    let (shutdown, shutdown_rx) = watch::channel(false);

    let sim_task = tokio::spawn(run_sim(
        sim,
        writer,
        cmd_rx,
        out_tx.clone(),
        shared.clone(),
        opts.clone(),
        shutdown_rx.clone(),
    ));
    let accept_task = tokio::spawn(accept_loop(listener, cmd_tx, out_tx, shared, shutdown_rx));
    Ok(ServerHandle {
        addr,
        shutdown,
        sim_task,
        accept_task,
    })
}

fn hello(sim: &Simulator, snapshot_rate: f64, role: Role) -> ServerMessage {
    let cfg = sim.config();
    ServerMessage::Hello {
        protocol: UI_PROTOCOL_VERSION,
        role,
        seed: sim.seed(),
        tick_rate: cfg.firmware.control_rate,
        snapshot_rate,
        hand: cfg.hand.clone(),
        keybed: sim.world().keybed().cloned(),
        config: sim.header().config,
    }
}

async fn run_sim(
    mut sim: Simulator,
    mut writer: Option<SessionWriter<std::io::BufWriter<std::fs::File>>>,
    mut commands: mpsc::Receiver<Pending>,
    out: broadcast::Sender<Arc<String>>,
    shared: Arc<Shared>,
    opts: ServeOptions,
    mut shutdown: watch::Receiver<bool>,
) -> anyhow::Result<ServeSummary> {
    let ticks_per_snapshot =
        ((sim.config().firmware.control_rate / opts.snapshot_rate).round() as u64).max(1);
    let mut clock = tokio::time::interval(Duration::from_secs_f64(sim.dt() / opts.speed));
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    let mut summary = ServeSummary::default();
    let publish = |msg: ServerMessage| {
        // no receivers is fine
        let _ = out.send(Arc::new(msg.to_json()));
    };
    loop {
        tokio::select! {
            _ = clock.tick() => {}
            _ = shutdown.changed() => break,
        }
        while let Ok(p) = commands.try_recv() {
            summary.commands += 1;
            let t = sim.time();
            let result = match &p.command {
                UiCommand::Splay { level } => sim
                    .set_splay(*level)
                    .map(|_| Some(UiEvent::Splay { level: *level })),
                UiCommand::Translate { x, y } => {
                    sim.set_translation(*x, *y);
                    Ok(Some(UiEvent::Translate { x: *x, y: *y }))
                }
                UiCommand::Task { task } => sim
                    .set_task(*task)
                    .map(|_| Some(UiEvent::Task { task: *task })),
                joint => match joint.to_frame() {
                    Ok(Some(frame)) => sim.send_frame(frame, CommandSource::Ui).map(|_| None),
                    Ok(None) => Ok(None),
                    Err(e) => {
                        let _ = p.reply.send(ServerMessage::Error {
                            code: ErrorCode::InvalidCommand,
                            message: e,
                        });
                        continue;
                    }
                },
            };
            match result {
                Ok(change) => {
                    if let Some(event) = change {
                        publish(ServerMessage::Event { t, event });
                    }
                    if matches!(p.command, UiCommand::Task { .. }) {
                        *shared.hello.lock().expect("hello lock") =
                            hello(&sim, opts.snapshot_rate, Role::Observer);
                    }
                    let _ = p.reply.send(ServerMessage::Event {
                        t,
                        event: UiEvent::Ack { id: p.id },
                    });
                }
                Err(e) => {
                    let _ = p.reply.send(ServerMessage::Error {
                        code: ErrorCode::InvalidCommand,
                        message: e.to_string(),
                    });
                }
            }
        }

        sim.step();
        summary.ticks += 1;
        for r in sim.take_records() {
            match &r {
                Record::Key {
                    t,
                    key,
                    finger,
                    pressed,
                } => publish(ServerMessage::Event {
                    t: *t,
                    event: UiEvent::Key {
                        key: key.clone(),
                        finger: *finger,
                        pressed: *pressed,
                    },
                }),
                Record::Firmware { t, event } => publish(ServerMessage::Event {
                    t: *t,
                    event: UiEvent::Firmware {
                        event: event.clone(),
                    },
                }),
                _ => {}
            }
            if let Some(w) = writer.as_mut() {
                w.write(&r)?;
            }
        }
        if sim.ticks().is_multiple_of(ticks_per_snapshot) {
            let mut world = sim.world().snapshot();
            world.t = sim.time();
            publish(ServerMessage::Snapshot {
                t: sim.time(),
                tick: sim.ticks(),
                world,
                telemetry: sim.firmware().telemetry(),
            });
        }
    }
    sim.finish();
    if let Some(mut w) = writer {
        for r in sim.take_records() {
            w.write(&r)?;
        }
        w.flush()?;
    }
    Ok(summary)
}

async fn accept_loop(
    listener: TcpListener,
    commands: mpsc::Sender<Pending>,
    out: broadcast::Sender<Arc<String>>,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) -> u64 {
    let mut clients = 0;
    let mut tasks = Vec::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                clients += 1;
                tasks.push(tokio::spawn(client(stream, commands.clone(), out.subscribe(), shared.clone(), shutdown.clone())));
            }
            _ = shutdown.changed() => break,
        }
    }
    for t in tasks {
        let _ = t.await;
    }
    clients
}

async fn client(
    stream: TcpStream,
    commands: mpsc::Sender<Pending>,
    mut out: broadcast::Receiver<Arc<String>>,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let id = shared.next_client.fetch_add(1, Ordering::Relaxed);
    let role = {
        let mut c = shared.controller.lock().expect("controller lock");
        if c.is_none() {
            *c = Some(id);
            Role::Controller
        } else {
            Role::Observer
        }
    };
    let mut greeting = shared.hello.lock().expect("hello lock").clone();
    if let ServerMessage::Hello { role: r, .. } = &mut greeting {
        *r = role;
    }
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMessage>();
    let mut ok = sink.send(Message::text(greeting.to_json())).await.is_ok();

    while ok {
        tokio::select! {
            incoming = source.next() => {
                let Some(Ok(msg)) = incoming else { break };
                let text = match msg {
                    Message::Text(t) => t,
                    Message::Close(_) => break,
                    Message::Ping(_) | Message::Pong(_) | Message::Frame(_) => continue,
                    Message::Binary(_) => {
                        violate(&mut sink, "binary messages are not part of the protocol").await;
                        break;
                    }
                };
                match serde_json::from_str::<ClientMessage>(text.as_str()) {
                    Err(e) => {
                        violate(&mut sink, &e.to_string()).await;
                        break;
                    }
                    Ok(ClientMessage::Command { id: cid, command }) => {
                        if role == Role::Observer {
                            let err = ServerMessage::Error {
                                code: ErrorCode::ReadOnly,
                                message: "this connection is a read-only observer".into(),
                            };
                            ok = sink.send(Message::text(err.to_json())).await.is_ok();
                            continue;
                        }
                        let pending = Pending { id: cid, command, reply: reply_tx.clone() };
                        if commands.send(pending).await.is_err() {
                            break;
                        }
                    }
                }
            }
            Some(reply) = replies.recv() => {
                ok = sink.send(Message::text(reply.to_json())).await.is_ok();
            }
            broadcast = out.recv() => {
                match broadcast {
                    Ok(text) => ok = sink.send(Message::text(text.as_str())).await.is_ok(),
                    Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
            _ = shutdown.changed() => {
                let _ = sink.send(Message::Close(Some(CloseFrame { code: CloseCode::Away, reason: "server shutting down".into() }))).await;
                break;
            }
        }
    }
    let mut c = shared.controller.lock().expect("controller lock");
    if *c == Some(id) {
        *c = None;
    }
}

async fn violate<S>(sink: &mut S, detail: &str)
where
    S: SinkExt<Message> + Unpin,
{
    let err = ServerMessage::Error {
        code: ErrorCode::ProtocolViolation,
        message: detail.to_string(),
    };
    let _ = sink.send(Message::text(err.to_json())).await;
    let _ = sink
        .send(Message::Close(Some(CloseFrame {
            code: CloseCode::Library(CLOSE_PROTOCOL_VIOLATION),
            reason: "protocol violation".into(),
        })))
        .await;
}

/// Serves until Ctrl-C.
pub async fn serve_forever(
    config: RunConfig,
    seed: u64,
    opts: ServeOptions,
) -> anyhow::Result<ServeSummary> {
    let handle = start(config, seed, opts).await?;
    eprintln!("listening on ws://{}", handle.addr);
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await
}
