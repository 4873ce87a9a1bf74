//! One-round federated protocol for cluster-robust variance.
//!
//! The server pushes the final coefficient estimates to every client; each
//! client aggregates its own retained records into a single k-vector and
//! replies once, with no identifier attached; the server folds each reply
//! into the sandwich accumulator and discards it. Wire mode runs the same
//! exchange through newline-delimited JSON frames over a local byte stream.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Record;
use crate::rls::VarianceReport;
use crate::robust::{ClusterContribution, DeltaMethodEffect, SandwichAccumulator};

/// Frames exchanged by the protocol. Client-bound and server-bound payloads
/// are k numbers; `Done` is the server-local terminal state and never
/// crosses the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum ProtocolMessage {
    PushBeta { beta: Vec<f64> },
    Contribution { u: Vec<f64> },
    DeltaContribution { n: u64, s: f64, d: u8 },
    Done { sigma: Vec<Vec<f64>> },
}

/// Serializes one frame per line.
pub fn write_frame(w: &mut impl Write, msg: &ProtocolMessage) -> Result<()> {
    serde_json::to_writer(&mut *w, msg)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl BufRead) -> Result<Option<ProtocolMessage>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(line.trim_end())?))
}

/// A simulated client: it retains its own records for the duration of the
/// experiment, all belonging to one implicit cluster.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub records: Vec<Record>,
}

impl ClientState {
    pub fn new(records: Vec<Record>) -> Self {
        ClientState { records }
    }

    /// Responds to a beta push with this cluster's aggregated contribution.
    /// Empty clients abstain (return nothing).
    pub fn compute_contribution(&self, beta: &[f64]) -> Result<Option<ProtocolMessage>> {
        if self.records.is_empty() {
            return Ok(None);
        }
        let c = ClusterContribution::from_records(&self.records, beta)?;
        Ok(Some(ProtocolMessage::Contribution { u: c.u }))
    }

    /// Covariate-free alternative: one (size, outcome sum, arm) triple.
    pub fn compute_delta_contribution(&self) -> Option<ProtocolMessage> {
        if self.records.is_empty() {
            return None;
        }
        let n = self.records.len() as u64;
        let s = self.records.iter().map(|r| r.y).sum();
        let d = if self.records[0].treated() { 1 } else { 0 };
        Some(ProtocolMessage::DeltaContribution { n, s, d })
    }
}

/// Server side of the aggregation: absorbs anonymous contributions as they
/// arrive; no contribution outlives its absorption.
#[derive(Debug)]
pub struct ServerState {
    pub beta_final: Vec<f64>,
    pub acc: SandwichAccumulator,
    pub expected_clients: usize,
    pub received: usize,
}

impl ServerState {
    pub fn new(beta_final: Vec<f64>, bread: DMatrix<f64>, expected_clients: usize) -> Result<Self> {
        if beta_final.is_empty() {
            return Err(Error::EmptyState("final beta not set"));
        }
        let k = beta_final.len();
        if bread.nrows() != k || bread.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: bread.nrows(),
            });
        }
        let mut acc = SandwichAccumulator::new(k);
        acc.set_bread(bread);
        Ok(ServerState {
            beta_final,
            acc,
            expected_clients,
            received: 0,
        })
    }

    /// The single broadcast frame; repeated calls yield identical messages.
    pub fn push_beta(&self) -> ProtocolMessage {
        ProtocolMessage::PushBeta {
            beta: self.beta_final.clone(),
        }
    }

    pub fn absorb(&mut self, msg: &ProtocolMessage) -> Result<()> {
        match msg {
            ProtocolMessage::Contribution { u } => {
                let c = ClusterContribution::new(u.clone())?;
                self.acc.absorb(&c)?;
                self.received += 1;
                Ok(())
            }
            other => Err(Error::Protocol(format!(
                "server expected a contribution frame, got {other:?}"
            ))),
        }
    }

    pub fn finalize(&self, quorum: f64) -> Result<VarianceReport> {
        if self.expected_clients > 0
            && (self.received as f64) < quorum * self.expected_clients as f64
        {
            return Err(Error::QuorumNotMet {
                received: self.received,
                expected: self.expected_clients,
                quorum,
            });
        }
        self.acc.assemble()
    }
}

/// How protocol frames travel between server and clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// Messages passed as in-memory values.
    InProcess,
    /// Newline-delimited JSON over a local duplex byte stream.
    Wire,
}

/// Message accounting for one protocol run, used to check the one-round and
/// payload-size guarantees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolStats {
    pub broadcasts: usize,
    pub contributions: usize,
    /// Payload length of every frame that crossed the boundary.
    pub payload_lens: Vec<usize>,
}

/// Executes the full one-round protocol over a partition of the data and
/// returns the assembled cluster-robust variance.
pub fn run_simulation(
    clients: &[ClientState],
    beta_final: &[f64],
    bread: DMatrix<f64>,
    transport: Transport,
    quorum: f64,
) -> Result<(VarianceReport, ProtocolStats)> {
    if clients.is_empty() {
        return Err(Error::EmptyState("no clients in partition"));
    }
    let expected = clients.iter().filter(|c| !c.records.is_empty()).count();
    let mut server = ServerState::new(beta_final.to_vec(), bread, expected)?;
    let mut stats = ProtocolStats::default();
    match transport {
        Transport::InProcess => {
            for client in clients {
                let push = server.push_beta();
                stats.broadcasts += 1;
                stats.payload_lens.push(payload_len(&push));
                let beta = match &push {
                    ProtocolMessage::PushBeta { beta } => beta.clone(),
                    _ => unreachable!(),
                };
                if let Some(reply) = client.compute_contribution(&beta)? {
                    stats.payload_lens.push(payload_len(&reply));
                    server.absorb(&reply)?;
                    stats.contributions += 1;
                }
            }
        }
        Transport::Wire => {
            run_wire(clients, &mut server, &mut stats, |client, beta| {
                client.compute_contribution(beta)
            })?;
        }
    }
    let report = server.finalize(quorum)?;
    Ok((report, stats))
}

/// Delta-method protocol mode: clients send one (n_j, s_j, d_j) triple with
/// no broadcast needed; the push still happens so the exchange shape matches
/// the CRSE round.
pub fn run_delta_simulation(
    clients: &[ClientState],
    beta_final: &[f64],
    transport: Transport,
) -> Result<(DeltaMethodEffect, ProtocolStats)> {
    if clients.is_empty() {
        return Err(Error::EmptyState("no clients in partition"));
    }
    let mut effect = DeltaMethodEffect::new();
    let mut stats = ProtocolStats::default();
    let absorb = |effect: &mut DeltaMethodEffect, msg: &ProtocolMessage| -> Result<()> {
        match msg {
            ProtocolMessage::DeltaContribution { n, s, d } => {
                effect.add_cluster(*d == 1, *n, *s);
                Ok(())
            }
            other => Err(Error::Protocol(format!(
                "expected a delta contribution frame, got {other:?}"
            ))),
        }
    };
    match transport {
        Transport::InProcess => {
            for client in clients {
                if let Some(reply) = client.compute_delta_contribution() {
                    stats.payload_lens.push(payload_len(&reply));
                    absorb(&mut effect, &reply)?;
                    stats.contributions += 1;
                }
            }
        }
        Transport::Wire => {
            for client in clients {
                let (server_sock, client_sock) = UnixStream::pair()?;
                let push = ProtocolMessage::PushBeta {
                    beta: beta_final.to_vec(),
                };
                let handle = spawn_client(client_sock, client.clone(), |client, _beta| {
                    Ok(client.compute_delta_contribution())
                });
                let mut writer = server_sock.try_clone()?;
                write_frame(&mut writer, &push)?;
                stats.broadcasts += 1;
                server_sock.set_read_timeout(Some(Duration::from_secs(5)))?;
                let mut reader = BufReader::new(server_sock);
                if let Some(reply) = read_frame(&mut reader)? {
                    stats.payload_lens.push(payload_len(&reply));
                    absorb(&mut effect, &reply)?;
                    stats.contributions += 1;
                }
                handle.join().map_err(|_| {
                    Error::Protocol("client thread panicked".to_string())
                })??;
            }
        }
    }
    Ok((effect, stats))
}

fn run_wire<F>(
    clients: &[ClientState],
    server: &mut ServerState,
    stats: &mut ProtocolStats,
    respond: F,
) -> Result<()>
where
    F: Fn(&ClientState, &[f64]) -> Result<Option<ProtocolMessage>> + Send + Copy + 'static,
{
    for client in clients {
        let (server_sock, client_sock) = UnixStream::pair()?;
        let push = server.push_beta();
        let handle = spawn_client(client_sock, client.clone(), respond);
        let mut writer = server_sock.try_clone()?;
        write_frame(&mut writer, &push)?;
        stats.broadcasts += 1;
        stats.payload_lens.push(payload_len(&push));
        server_sock.set_read_timeout(Some(Duration::from_secs(5)))?;
        let mut reader = BufReader::new(server_sock);
        match read_frame(&mut reader) {
            Ok(Some(reply)) => {
                stats.payload_lens.push(payload_len(&reply));
                server.absorb(&reply)?;
                stats.contributions += 1;
            }
            Ok(None) => {} // client abstained and closed
            Err(Error::Io(e))
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {} // late client
            Err(e) => return Err(e),
        }
        handle
            .join()
            .map_err(|_| Error::Protocol("client thread panicked".to_string()))??;
    }
    Ok(())
}

fn spawn_client<F>(
    sock: UnixStream,
    client: ClientState,
    respond: F,
) -> std::thread::JoinHandle<Result<()>>
where
    F: Fn(&ClientState, &[f64]) -> Result<Option<ProtocolMessage>> + Send + 'static,
{
    std::thread::spawn(move || -> Result<()> {
        let mut writer = sock.try_clone()?;
        let mut reader = BufReader::new(sock);
        let Some(msg) = read_frame(&mut reader)? else {
            return Ok(());
        };
        let beta = match msg {
            ProtocolMessage::PushBeta { beta } => beta,
            other => {
                return Err(Error::Protocol(format!(
                    "client expected a beta push, got {other:?}"
                )))
            }
        };
        if let Some(reply) = respond(&client, &beta)? {
            write_frame(&mut writer, &reply)?;
        }
        // single reply, then the connection closes
        Ok(())
    })
}

fn payload_len(msg: &ProtocolMessage) -> usize {
    match msg {
        ProtocolMessage::PushBeta { beta } => beta.len(),
        ProtocolMessage::Contribution { u } => u.len(),
        ProtocolMessage::DeltaContribution { .. } => 3,
        ProtocolMessage::Done { sigma } => sigma.iter().map(Vec::len).sum(),
    }
}

/// Splits a retained record set into one client per cluster. Records without
/// a cluster id become singleton clients.
pub fn partition_by_cluster(records: Vec<Record>) -> Vec<ClientState> {
    use std::collections::BTreeMap;
    let mut keyed: BTreeMap<Vec<u8>, Vec<Record>> = BTreeMap::new();
    let mut singletons = Vec::new();
    for r in records {
        match r.cluster_id.clone() {
            Some(id) => keyed.entry(id).or_default().push(r),
            None => singletons.push(vec![r]),
        }
    }
    keyed
        .into_values()
        .chain(singletons)
        .map(ClientState::new)
        .collect()
}
