//! TCP console service. The runtime thread owns the world; connections talk
//! to it only through channels.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::binpack::{binpack_schedule, BinPackWorld};
use super::scheduler::{Rate, TraceRecord};
use super::wire::{parse_command, Frame};

/// Sim runs the schedule as fast as it can; wall paces it to real time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Sim,
    Wall,
}

/// Trace records kept for inspection.
const TRACE_CAPACITY: usize = 100_000;
const POLL: Duration = Duration::from_millis(20);

struct Command {
    frame: Frame,
    reply: Sender<String>,
}

type Clients = Arc<Mutex<Vec<Sender<String>>>>;

pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    trace: Arc<Mutex<VecDeque<TraceRecord>>>,
    failure: Arc<Mutex<Option<String>>>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Most recent trace records, oldest first.
    pub fn trace(&self) -> Vec<TraceRecord> {
        self.trace.lock().expect("trace lock").iter().cloned().collect()
    }

    /// Error that stopped the runtime thread, if any.
    pub fn failure(&self) -> Option<String> {
        self.failure.lock().expect("failure lock").clone()
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the runtime stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Binds `address` and starts serving `world`. Port 0 picks a free port.
pub fn serve_console(world: BinPackWorld, address: &str, clock: ClockMode) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(address)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let clients: Clients = Arc::default();
    let trace = Arc::new(Mutex::new(VecDeque::new()));
    let failure = Arc::new(Mutex::new(None));
    let (cmd_tx, cmd_rx) = channel();

    let runtime = {
        let (stop, clients, trace, failure) = (stop.clone(), clients.clone(), trace.clone(), failure.clone());
        std::thread::spawn(move || {
            if let Err(e) = runtime_loop(world, clock, cmd_rx, &stop, &clients, &trace) {
                *failure.lock().expect("failure lock") = Some(e);
            }
            stop.store(true, Ordering::SeqCst);
            clients.lock().expect("clients lock").clear();
        })
    };
    let acceptor = {
        let stop = stop.clone();
        std::thread::spawn(move || accept_loop(listener, &stop, &clients, &cmd_tx))
    };
    Ok(ServiceHandle { addr, stop, trace, failure, threads: vec![runtime, acceptor] })
}

fn runtime_loop(
    mut world: BinPackWorld,
    clock: ClockMode,
    commands: Receiver<Command>,
    stop: &AtomicBool,
    clients: &Clients,
    trace: &Mutex<VecDeque<TraceRecord>>,
) -> Result<(), String> {
    let mut schedule = binpack_schedule(&world.cfg);
    let fabric = Rate::hz(world.cfg.rates.fabric);
    let every = world.cfg.rates.fabric / world.cfg.serve.state_rate;
    let start = Instant::now();
    let mut k = 0u64;
    while !stop.load(Ordering::SeqCst) {
        while let Ok(Command { frame, reply }) = commands.try_recv() {
            if let Err(e) = world.apply_command(&frame) {
                let _ = reply.send(e.to_frame().to_line());
            }
        }
        k += 1;
        let until = fabric.tick_of(k);
        if clock == ClockMode::Wall {
            let due = start + Duration::from_micros(until);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let records = schedule.run_until(&mut world, until).map_err(|e| e.to_string())?;
        {
            let mut t = trace.lock().expect("trace lock");
            t.extend(records);
            while t.len() > TRACE_CAPACITY {
                t.pop_front();
            }
        }
        if k % every == 0 {
            let line = Frame::State(world.state_frame()).to_line();
            clients.lock().expect("clients lock").retain(|c| c.send(line.clone()).is_ok());
        }
    }
    Ok(())
}

fn accept_loop(listener: TcpListener, stop: &Arc<AtomicBool>, clients: &Clients, commands: &Sender<Command>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Err(e) = connect(stream, stop.clone(), clients, commands.clone()) {
                    eprintln!("console connection dropped: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                eprintln!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
}

fn connect(stream: TcpStream, stop: Arc<AtomicBool>, clients: &Clients, commands: Sender<Command>) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let (tx, rx) = channel::<String>();
    clients.lock().expect("clients lock").push(tx.clone());
    std::thread::spawn(move || {
        for line in rx {
            if writer.write_all(line.as_bytes()).is_err() {
                break;
            }
        }
    });
    std::thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        while !stop.load(Ordering::SeqCst) {
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if !line.trim().is_empty() {
                        match parse_command(&line) {
                            Ok(frame) => {
                                if commands.send(Command { frame, reply: tx.clone() }).is_err() {
                                    break;
                                }
                            }
                            Err(e) => {
                                if tx.send(e.to_frame().to_line()).is_err() {
                                    break;
                                }
                            }
                        }
                    }
                    line.clear();
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
    });
    Ok(())
}
