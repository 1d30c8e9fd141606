use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;

use costroke_core::encoder::EncoderBackend;
use costroke_core::engine::{Edit, OptimState, PruneConfig};
use costroke_core::io::{svg_export, svg_import, Config};
use costroke_core::sketch::{Region, Sketch};
use tokio::sync::{mpsc::UnboundedSender, watch};

use crate::protocol::{AckOutcome, ErrorCode, ServerBody, ServerMessage, Snapshot, DEFAULT_SNAPSHOT_EVERY};

pub(crate) enum Command {
    Edit(String, Edit),
    Start(String, Option<u64>),
    Pause(String),
    Prune(String, PruneConfig),
    Export(String),
}

pub(crate) struct CreateRequest {
    pub request_id: String,
    pub session_id: String,
    pub prompt: String,
    pub config: Option<Config>,
    pub svg: Option<String>,
    pub region: Option<[f64; 4]>,
    pub snapshot_every: Option<u64>,
}

/// Handle held by the connection; dropping it stops the worker.
pub(crate) struct SessionHandle {
    pub commands: mpsc::Sender<Command>,
    pub snapshots: watch::Receiver<Option<Snapshot>>,
}

/// Spawns the session's worker thread. Creation failures are reported on
/// `replies` and end the worker.
pub(crate) fn spawn(
    req: CreateRequest,
    backend: Arc<dyn EncoderBackend>,
    replies: UnboundedSender<ServerMessage>,
    on_exit: impl FnOnce() + Send + 'static,
) -> SessionHandle {
    let (commands, rx) = mpsc::channel();
    let (snap_tx, snapshots) = watch::channel(None);
    std::thread::spawn(move || {
        let request_id = req.request_id.clone();
        match Worker::create(req, backend, replies.clone(), snap_tx) {
            Ok(worker) => worker.run(rx),
            Err(detail) => {
                let _ = replies.send(ServerBody::Error { request_id: Some(request_id), code: ErrorCode::Input, detail, step: None }.into());
            }
        }
        on_exit();
    });
    SessionHandle { commands, snapshots }
}

struct Worker {
    id: String,
    state: OptimState,
    running: bool,
    until: Option<u64>,
    every: u64,
    replies: UnboundedSender<ServerMessage>,
    snapshots: watch::Sender<Option<Snapshot>>,
}

impl Worker {
    fn create(
        req: CreateRequest,
        backend: Arc<dyn EncoderBackend>,
        replies: UnboundedSender<ServerMessage>,
        snapshots: watch::Sender<Option<Snapshot>>,
    ) -> Result<Self, String> {
        let config = req.config.unwrap_or_default();
        config.validate().map_err(|e| e.to_string())?;
        let sketch = match &req.svg {
            Some(svg) => svg_import(svg).map_err(|e| e.to_string())?,
            None => Sketch::default(),
        };
        let region = match req.region {
            Some([x0, y0, x1, y1]) => Region::new(x0, y0, x1, y1).map_err(|e| e.to_string())?,
            None => Region::full(),
        };
        let every = req.snapshot_every.unwrap_or(DEFAULT_SNAPSHOT_EVERY);
        if every == 0 {
            return Err("snapshot_every must be positive".into());
        }
        let state = OptimState::initialized(sketch, &req.prompt, region, config.engine(), backend, config.seed)
            .map_err(|e| e.to_string())?;
        let mut worker = Self { id: req.session_id, state, running: false, until: None, every, replies, snapshots };
        worker.reply(ServerBody::Ack { request_id: req.request_id, session_id: worker.id.clone(), outcome: None });
        worker.publish();
        Ok(worker)
    }

    fn run(mut self, rx: Receiver<Command>) {
        loop {
            let next = if self.running {
                match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                }
            } else {
                match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                }
            };
            match next {
                // Edits are applied between steps, never during one.
                Some(cmd) => self.handle(cmd),
                None => self.advance(),
            }
        }
    }

    fn advance(&mut self) {
        if let Err(e) = self.state.step() {
            self.running = false;
            let step = self.state.step_count();
            self.reply(ServerBody::Error { request_id: None, code: ErrorCode::Engine, detail: e.to_string(), step: Some(step) });
            self.publish();
            return;
        }
        let step = self.state.step_count();
        let done = self.until.is_some_and(|u| step >= u);
        if done {
            self.running = false;
            self.until = None;
        }
        if done || step % self.every == 0 {
            self.publish();
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Edit(rid, edit) => match self.state.apply_edit(edit) {
                Ok(outcome) => {
                    self.ack(rid, Some(AckOutcome::Edit(outcome)));
                    self.publish();
                }
                Err(e) => self.fail(rid, e.to_string()),
            },
            Command::Start(rid, until) => {
                let step = self.state.step_count();
                self.until = until;
                self.running = until.is_none_or(|u| u > step);
                self.ack(rid, None);
                if !self.running {
                    self.publish();
                }
            }
            Command::Pause(rid) => {
                let was = self.running;
                self.running = false;
                self.until = None;
                self.ack(rid, None);
                if was {
                    self.publish();
                }
            }
            Command::Prune(rid, cfg) => match self.state.prune(cfg) {
                Ok(report) => {
                    self.ack(rid, Some(AckOutcome::Pruned { removed: report.removed }));
                    self.publish();
                }
                Err(e) => self.fail(rid, e.to_string()),
            },
            Command::Export(rid) => {
                self.reply(ServerBody::Exported { request_id: rid, svg: svg_export(self.state.sketch()) });
            }
        }
    }

    /// Sends the current traces with the loss evaluated at exactly those
    /// parameters.
    fn publish(&mut self) {
        let loss = match self.state.evaluate() {
            Ok((loss, _)) => loss,
            Err(e) => {
                let step = self.state.step_count();
                self.reply(ServerBody::Error { request_id: None, code: ErrorCode::Engine, detail: e.to_string(), step: Some(step) });
                return;
            }
        };
        let snap = Snapshot {
            session_id: self.id.clone(),
            step: self.state.step_count(),
            running: self.running,
            traces: self.state.sketch().traces().to_vec(),
            loss,
        };
        self.snapshots.send_replace(Some(snap));
    }

    fn ack(&self, request_id: String, outcome: Option<AckOutcome>) {
        self.reply(ServerBody::Ack { request_id, session_id: self.id.clone(), outcome });
    }

    fn fail(&self, request_id: String, detail: String) {
        self.reply(ServerBody::Error { request_id: Some(request_id), code: ErrorCode::Input, detail, step: None });
    }

    fn reply(&self, body: ServerBody) {
        let _ = self.replies.send(body.into());
    }
}
