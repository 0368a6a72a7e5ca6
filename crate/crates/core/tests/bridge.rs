use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use mimic_core::bridge::{decode_request, encode_error, encode_response, BridgeClient};
use mimic_core::encoder::{BuiltinEncoder, Clip, EncoderError, EncoderParams};
use mimic_core::render::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serves the built-in encoder over the bridge protocol, one thread per connection.
fn spawn_mock(params: EncoderParams) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let params = params.clone();
            thread::spawn(move || serve_builtin(stream, params));
        }
    });
    addr
}

fn serve_builtin(stream: TcpStream, params: EncoderParams) {
    let enc = BuiltinEncoder::new(params.clone());
    stream.set_nodelay(true).unwrap();
    let mut out = stream.try_clone().unwrap();
    writeln!(out, r#"{{"hello":"mock","d":{},"model_name":"builtin-mock"}}"#, params.d).unwrap();
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        let reply = match decode_request(&line) {
            Ok(req) => {
                let frames = req
                    .frames
                    .into_iter()
                    .enumerate()
                    .map(|(i, data)| Frame { width: req.w, height: req.h, data, index: i })
                    .collect();
                let e = enc.encode_clip(&Clip::new(frames, 0).unwrap());
                let v: Vec<f32> = e.values.iter().map(|&x| x as f32).collect();
                encode_response(req.id, &v)
            }
            Err((id, code)) => encode_error(id, &code),
        };
        if out.write_all(format!("{reply}\n").as_bytes()).is_err() {
            break;
        }
    }
}

/// Accepts one connection and runs `script` on it.
fn spawn_scripted(script: impl FnOnce(TcpStream) + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        if let Ok((s, _)) = listener.accept() {
            script(s)
        }
    });
    addr
}

fn random_clip(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Clip {
    let frames = (0..8)
        .map(|i| Frame { width: w, height: h, data: (0..h * w).map(|_| rng.random()).collect(), index: i })
        .collect();
    Clip::new(frames, 7).unwrap()
}

#[test]
fn mock_bridge_matches_builtin_encoder() {
    let params = EncoderParams { seed: 11, ..Default::default() };
    let addr = spawn_mock(params.clone());
    let mut client = BridgeClient::connect(&format!("tcp://{addr}"), Duration::from_secs(10)).unwrap();
    assert_eq!(client.handshake_info().d, 64);
    let local = BuiltinEncoder::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let clip = random_clip(&mut rng, 16, 24);
        let remote = client.encode_clip(&clip).unwrap();
        let expected = local.encode_clip(&clip);
        for (a, b) in remote.values.iter().zip(&expected.values) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_clip_is_finite_and_repeatable() {
    let addr = spawn_mock(EncoderParams::default());
    let mut client = BridgeClient::connect(&addr, Duration::from_secs(10)).unwrap();
    let clip = Clip::new(vec![Frame::black(64, 64); 8], 0).unwrap();
    let a = client.encode_clip(&clip).unwrap();
    let b = client.encode_clip(&clip).unwrap();
    assert_eq!(a.dim(), 64);
    assert!(a.values.iter().all(|v| v.is_finite()));
    assert_eq!(a, b);
}

#[test]
fn connections_are_independent() {
    let addr = spawn_mock(EncoderParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clip = random_clip(&mut rng, 8, 8);
    let mut a = BridgeClient::connect(&addr, Duration::from_secs(10)).unwrap();
    let mut b = BridgeClient::connect(&addr, Duration::from_secs(10)).unwrap();
    let ea = a.encode_clip(&clip).unwrap();
    drop(a);
    assert_eq!(b.encode_clip(&clip).unwrap(), ea);
}

#[test]
fn malformed_reply_is_protocol_error() {
    let addr = spawn_scripted(|mut s| {
        writeln!(s, r#"{{"hello":1,"d":4,"model_name":"bad"}}"#).unwrap();
        let mut line = String::new();
        BufReader::new(s.try_clone().unwrap()).read_line(&mut line).unwrap();
        writeln!(s, "this is not json").unwrap();
        thread::sleep(Duration::from_millis(200));
    });
    let mut client = BridgeClient::connect(&addr, Duration::from_secs(10)).unwrap();
    let clip = Clip::new(vec![Frame::black(8, 8); 8], 0).unwrap();
    assert!(matches!(client.encode_clip(&clip), Err(EncoderError::Protocol(_))));
}

#[test]
fn bad_handshake_is_protocol_error() {
    let addr = spawn_scripted(|mut s| {
        writeln!(s, r#"{{"greeting":"hi"}}"#).unwrap();
        thread::sleep(Duration::from_millis(200));
    });
    assert!(matches!(BridgeClient::connect(&addr, Duration::from_secs(10)), Err(EncoderError::Protocol(_))));
}

#[test]
fn silent_server_times_out() {
    let addr = spawn_scripted(|mut s| {
        writeln!(s, r#"{{"hello":1,"d":4,"model_name":"slow"}}"#).unwrap();
        thread::sleep(Duration::from_secs(2));
    });
    let mut client = BridgeClient::connect(&addr, Duration::from_millis(300)).unwrap();
    let clip = Clip::new(vec![Frame::black(8, 8); 8], 0).unwrap();
    assert!(matches!(client.encode_clip(&clip), Err(EncoderError::Timeout(_))));
}

#[test]
fn closed_server_is_unavailable() {
    let addr = spawn_scripted(|mut s| {
        writeln!(s, r#"{{"hello":1,"d":4,"model_name":"dying"}}"#).unwrap();
    });
    let mut client = BridgeClient::connect(&addr, Duration::from_secs(5)).unwrap();
    let clip = Clip::new(vec![Frame::black(8, 8); 8], 0).unwrap();
    assert!(matches!(client.encode_clip(&clip), Err(EncoderError::BridgeUnavailable(_))));
}

#[test]
fn refused_connection_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let r = BridgeClient::connect(&format!("127.0.0.1:{port}"), Duration::from_secs(1));
    assert!(matches!(r, Err(EncoderError::BridgeUnavailable(_))));
}

#[test]
fn dead_process_is_unavailable() {
    assert!(matches!(
        BridgeClient::connect("stdio:true", Duration::from_secs(5)),
        Err(EncoderError::BridgeUnavailable(_))
    ));
    assert!(matches!(
        BridgeClient::connect("stdio:/nonexistent/bridge", Duration::from_secs(5)),
        Err(EncoderError::BridgeUnavailable(_))
    ));
}

#[test]
fn stdio_transport_speaks_protocol() {
    // handshake then echo: the echoed request carries the right id but no embedding
    let script = r#"echo '{"hello":1,"d":2,"model_name":"echo"}'; exec cat"#;
    let mut client = BridgeClient::spawn("sh", &["-c", script], Duration::from_secs(5)).unwrap();
    assert_eq!(client.handshake_info().model_name, "echo");
    let clip = Clip::new(vec![Frame::black(4, 4); 8], 0).unwrap();
    match client.encode_clip(&clip) {
        Err(EncoderError::Protocol(m)) => assert!(m.contains("d"), "{m}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}
