//! Single-threaded HTTP stub replaying canned replies in order.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread::JoinHandle;

pub struct Stub {
    pub url: String,
    /// Request bodies, in arrival order.
    pub requests: mpsc::Receiver<String>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    /// Serves one `(status, body)` per connection, then stops.
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/locate", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some((name, value)) = line.split_once(':') {
                        if name.eq_ignore_ascii_case("content-length") {
                            length = value.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut request = vec![0; length];
                reader.read_exact(&mut request).ok();
                tx.send(String::from_utf8_lossy(&request).into_owned()).ok();
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).ok();
            }
        });
        Self {
            url,
            requests: rx,
            handle: Some(handle),
        }
    }

    pub fn ok_text(text: &str) -> (u16, String) {
        (200, serde_json::json!({ "text": text }).to_string())
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        // Threads still blocked in accept() are left to die with the process.
        if let Some(h) = self.handle.take() {
            if h.is_finished() {
                h.join().ok();
            }
        }
    }
}
