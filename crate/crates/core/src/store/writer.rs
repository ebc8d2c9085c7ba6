use std::path::Path;
use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use tokio::sync::oneshot;

use super::{Store, StoreError};
use crate::sample::PollOutcome;

enum Command {
    EnsureTable(String, oneshot::Sender<Result<(), StoreError>>),
    Append(PollOutcome, oneshot::Sender<Result<u64, StoreError>>),
    Shutdown,
}

/// Owns the writable store on a dedicated thread; all appends go through
/// its queue, one at a time.
pub struct StoreWriter {
    sink: StoreSink,
    thread: Option<JoinHandle<()>>,
}

/// Cloneable append handle shared by polling tasks.
#[derive(Clone)]
pub struct StoreSink {
    tx: mpsc::Sender<Command>,
}

impl StoreWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<StoreWriter, StoreError> {
        let store = Store::open(path)?;
        Ok(StoreWriter::spawn(store))
    }

    pub fn spawn(mut store: Store) -> StoreWriter {
        let (tx, rx) = mpsc::channel();
        let thread = thread::Builder::new()
            .name("store-writer".into())
            .spawn(move || {
                for cmd in rx {
                    match cmd {
                        Command::EnsureTable(name, reply) => {
                            let _ = reply.send(store.ensure_table(&name));
                        }
                        Command::Append(outcome, reply) => {
                            let _ = reply.send(store.append(outcome));
                        }
                        Command::Shutdown => break,
                    }
                }
            })
            .expect("spawn store writer thread");
        StoreWriter { sink: StoreSink { tx }, thread: Some(thread) }
    }

    pub fn sink(&self) -> StoreSink {
        self.sink.clone()
    }

    /// Finish queued appends and release the file lock.
    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.sink.tx.send(Command::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl StoreSink {
    pub async fn ensure_table(&self, name: &str) -> Result<(), StoreError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::EnsureTable(name.to_owned(), reply))
            .map_err(|_| StoreError::Closed)?;
        rx.await.map_err(|_| StoreError::Closed)?
    }

    pub async fn append(&self, outcome: PollOutcome) -> Result<u64, StoreError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Append(outcome, reply)).map_err(|_| StoreError::Closed)?;
        rx.await.map_err(|_| StoreError::Closed)?
    }
}
