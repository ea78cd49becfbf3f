//! Websocket bridge between a browser client and a [`TeleopSession`].
//!
//! The session lives on its own thread and ticks at a fixed rate. Client
//! actions go through a single-slot mailbox (last writer wins), controls and
//! connection events through a queue, and every tick's state is broadcast to
//! all connected sockets. When the last client leaves a running session is
//! paused, and it resumes when a client connects again.

use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use cubedagger::teleop::{ClientAction, ControlCommand, TeleopConfig, TeleopMessage, TeleopSession};
use futures::{SinkExt, StreamExt};
use tokio::sync::{broadcast, oneshot, watch};

#[derive(Debug)]
enum LoopEvent {
    Control(ControlCommand),
    Connected,
    Disconnected,
    Stop,
}

#[derive(Clone)]
struct AppState {
    actions: watch::Sender<Option<ClientAction>>,
    events: mpsc::Sender<LoopEvent>,
    states: broadcast::Sender<String>,
}

pub struct TeleopServer {
    addr: SocketAddr,
    events: mpsc::Sender<LoopEvent>,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<()>,
    control: Option<thread::JoinHandle<()>>,
}

impl TeleopServer {
    /// Binds `addr` (port 0 picks a free port) and starts the control loop.
    pub async fn start(config: TeleopConfig, addr: SocketAddr) -> Result<Self> {
        let session = TeleopSession::new(config).context("building teleop session")?;
        let (actions, action_rx) = watch::channel(None);
        let (events, event_rx) = mpsc::channel();
        let (states, _) = broadcast::channel(64);

        let loop_states = states.clone();
        let control = thread::Builder::new()
            .name("teleop-loop".into())
            .spawn(move || control_loop(session, action_rx, event_rx, loop_states))?;

        let app = Router::new()
            .route("/ws", get(upgrade))
            .route("/", get(|| async { "cubedagger teleop bridge: connect a websocket to /ws\n" }))
            .with_state(AppState {
                actions,
                events: events.clone(),
                states,
            });
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let addr = listener.local_addr()?;
        let (shutdown, shutdown_rx) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            });
            if let Err(e) = serve.await {
                log::error!("teleop server: {e}");
            }
        });
        log::info!("teleop bridge listening on ws://{addr}/ws");
        Ok(Self {
            addr,
            events,
            shutdown: Some(shutdown),
            server,
            control: Some(control),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Serves until the process is interrupted.
    pub async fn run_until_ctrl_c(self) -> Result<()> {
        tokio::signal::ctrl_c().await?;
        self.stop().await;
        Ok(())
    }

    pub async fn stop(mut self) {
        let _ = self.events.send(LoopEvent::Stop);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        if let Some(handle) = self.control.take() {
            let _ = tokio::task::spawn_blocking(move || handle.join()).await;
        }
    }
}

fn control_loop(
    mut session: TeleopSession,
    mut actions: watch::Receiver<Option<ClientAction>>,
    events: mpsc::Receiver<LoopEvent>,
    states: broadcast::Sender<String>,
) {
    let period = Duration::from_secs_f64(1.0 / session.config().tick_hz);
    let mut clients = 0usize;
    let mut paused_by_disconnect = false;
    let mut next = Instant::now() + period;
    loop {
        while let Ok(event) = events.try_recv() {
            let result = match event {
                LoopEvent::Stop => return,
                LoopEvent::Control(c) => {
                    paused_by_disconnect = false;
                    session.control(c)
                }
                LoopEvent::Connected => {
                    clients += 1;
                    if paused_by_disconnect {
                        paused_by_disconnect = false;
                        session.control(ControlCommand::Start)
                    } else {
                        Ok(())
                    }
                }
                LoopEvent::Disconnected => {
                    clients = clients.saturating_sub(1);
                    if clients == 0 && session.is_running() {
                        paused_by_disconnect = true;
                        session.control(ControlCommand::Pause)
                    } else {
                        Ok(())
                    }
                }
            };
            if let Err(e) = result {
                report(&states, format!("control rejected: {e}"));
            }
        }
        if actions.has_changed().unwrap_or(false) {
            if let Some(a) = actions.borrow_and_update().clone() {
                if let Err(e) = session.submit(a) {
                    report(&states, format!("action rejected: {e}"));
                }
            }
        }
        match session.tick() {
            Ok(state) => {
                let _ = states.send(TeleopMessage::ServerState(state).encode());
            }
            Err(e) => report(&states, format!("episode aborted: {e}")),
        }

        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
            next += period;
        } else {
            // Training at an episode boundary overran the tick; start a new
            // schedule rather than bursting to catch up.
            next = now + period;
        }
    }
}

fn report(states: &broadcast::Sender<String>, message: String) {
    log::warn!("{message}");
    let _ = states.send(TeleopMessage::Error { message }.encode());
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn client(socket: WebSocket, app: AppState) {
    let _ = app.events.send(LoopEvent::Connected);
    let (mut sink, mut stream) = socket.split();
    let mut states = app.states.subscribe();
    let (replies, mut reply_rx) = tokio::sync::mpsc::unbounded_channel::<String>();

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                s = states.recv() => match s {
                    Ok(text) => text,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::debug!("client lagged by {n} states");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                r = reply_rx.recv() => match r {
                    Some(text) => text,
                    None => break,
                },
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(message)) = stream.next().await {
        let text = match message {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        match TeleopMessage::decode(text.as_str()) {
            Ok(TeleopMessage::ClientAction(a)) => {
                app.actions.send_replace(Some(a));
            }
            Ok(TeleopMessage::Control(c)) => {
                let _ = app.events.send(LoopEvent::Control(c));
            }
            Ok(_) => {
                let _ = replies.send(
                    TeleopMessage::Error {
                        message: "clients may only send client_action and control".into(),
                    }
                    .encode(),
                );
            }
            Err(e) => {
                let _ = replies.send(
                    TeleopMessage::Error {
                        message: e.to_string(),
                    }
                    .encode(),
                );
            }
        }
    }
    writer.abort();
    let _ = app.events.send(LoopEvent::Disconnected);
}
