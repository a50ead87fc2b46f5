use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use kdn_core::codec::{decompress_cache, CodecProfile};
use kdn_core::delivery::{
    decode_frame, encode_frame, serve, Client, Decoded, Frame, FrameType, LinkModel, Request, ServeOptions,
    Session, SimulatedConnection,
};
use kdn_core::model::TokenId;
use kdn_core::store::{KeyMode, Store, StoreConfig};
use kdn_core::{Model, ModelConfig};
use proptest::prelude::*;

fn frame_type() -> impl Strategy<Value = FrameType> {
    prop::sample::select(vec![
        FrameType::ReqKeys,
        FrameType::ReqTokens,
        FrameType::Chunk,
        FrameType::End,
        FrameType::Err,
    ])
}

fn stocked_store(dir: &std::path::Path, tokens: &[TokenId], mode: KeyMode) -> (Arc<Store>, Model) {
    let store = Store::open(StoreConfig::new(dir).with_chunk_size(8)).unwrap();
    let model = Model::new(ModelConfig::new(2, 2, 4, 64)).unwrap();
    store
        .store_text(&model, tokens, mode, &CodecProfile::default())
        .unwrap();
    (Arc::new(store), model)
}

fn text(n: usize) -> Vec<TokenId> {
    (0..n as u32).map(|i| (i * 13 + 5) % 64).collect()
}

proptest! {
    #[test]
    fn frames_roundtrip(t in frame_type(), payload in prop::collection::vec(any::<u8>(), 0..512)) {
        let f = Frame::new(t, payload);
        let bytes = encode_frame(&f);
        prop_assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Frame(f, bytes.len()));
    }

    #[test]
    fn session_survives_garbage(garbage in prop::collection::vec(any::<u8>(), 0..256)) {
        let dir = tempfile::tempdir().unwrap();
        let (store, model) = stocked_store(dir.path(), &text(16), KeyMode::Chain);
        let mut s = Session::new(store);
        let _ = s.feed(&garbage);
        // A frame-aligned request after any garbage is still answered: flush
        // the decoder with a full bogus frame first so leftovers cannot
        // swallow the request.
        let _ = s.feed(&encode_frame(&Frame::new(FrameType::End, vec![0; 300])));
        let req = Request::Tokens { model_id: model.model_id(), mode: KeyMode::Chain, tokens: text(16) };
        let out = s.feed(&encode_frame(&req.to_frame()));
        prop_assert!(out.iter().any(|f| f.frame_type == FrameType::End));
    }
}

#[test]
fn tcp_put_serve_fetch_is_element_exact() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = text(30);
    let (store, model) = stocked_store(dir.path(), &tokens, KeyMode::Chain);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (store, stop) = (store.clone(), stop.clone());
        std::thread::spawn(move || serve(store, listener, ServeOptions::default(), stop))
    };

    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut client = Client::new(stream);
    let got = client
        .fetch_tokens(model.model_id(), &tokens, KeyMode::Chain)
        .unwrap();
    assert!(got.miss_suffix.is_empty());
    let local = store.retrieve_text(model.model_id(), &tokens, KeyMode::Chain);
    assert_eq!(got.chunks.len(), local.hits.len());
    let mut pos = 0;
    for (f, (key, chunk)) in got.chunks.iter().zip(&local.hits) {
        assert_eq!(&f.key, key);
        let expect = decompress_cache(chunk).unwrap();
        assert_eq!(f.cache.k(), expect.k());
        assert_eq!(f.cache.v(), expect.v());
        assert_eq!(f.cache.start_pos(), pos);
        pos += f.cache.n_tokens() as u64;
    }

    // Same connection, unknown text: everything misses.
    let other = vec![1, 1, 1];
    let miss = client
        .fetch_tokens(model.model_id(), &other, KeyMode::Chain)
        .unwrap();
    assert!(miss.chunks.is_empty());
    assert_eq!(miss.miss_suffix, other);

    stop.store(true, Ordering::SeqCst);
    drop(client);
    server.join().unwrap().unwrap();
}

#[test]
fn standalone_fetch_reports_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = text(16);
    let (store, model) = stocked_store(dir.path(), &tokens, KeyMode::Standalone);
    let mut query = tokens[..8].to_vec();
    query.extend([0u32; 8]);
    query.extend(&tokens[8..]);
    let mut client = Client::new(SimulatedConnection::new(store, LinkModel::new(1e9, 0.0).unwrap()));
    let got = client
        .fetch_tokens(model.model_id(), &query, KeyMode::Standalone)
        .unwrap();
    assert_eq!(got.chunks.len(), 2);
    assert_eq!(got.miss_suffix, query[8..].to_vec());
    assert!(got.chunks.iter().all(|c| c.cache.start_pos() == 0));
}

#[test]
fn simulated_fetch_time_tracks_bytes_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = text(64);
    let (store, model) = stocked_store(dir.path(), &tokens, KeyMode::Chain);
    let link = LinkModel::new(2e5, 0.002).unwrap();
    let mut client = Client::new(SimulatedConnection::new(store, link));
    let got = client
        .fetch_tokens(model.model_id(), &tokens, KeyMode::Chain)
        .unwrap();
    let clock = client.get_ref().clock();
    let k = got.chunks.len() as f64 + 2.0;
    let expected = got.compressed_bytes() as f64 / link.bandwidth + k * link.latency;
    assert_eq!(clock.frames(), got.chunks.len() as u64 + 2);
    assert!(
        (clock.now() - expected).abs() <= 0.1 * expected,
        "{} vs {expected}",
        clock.now()
    );
}
