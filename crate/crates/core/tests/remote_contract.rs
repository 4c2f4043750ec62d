use std::sync::{Arc, Mutex};

use visaff_core::datamodel::{Conversation, MediaRefs, Split, Utterance};
use visaff_core::error::Error;
use visaff_core::prompting::{build_prompt_bundle, PromptBundle, PromptConfig, PromptTemplates, VadLexicon};
use visaff_core::providers::mock::{MockEmbeddingServer, MockReply};
use visaff_core::providers::{
    extract_remote, EmbedRequest, EmbeddingClient, EndpointConfig, FeatureCache, Modality, Provider,
};

fn conversation() -> Conversation {
    let utterances = (0..3)
        .map(|i| Utterance {
            conv_id: "dlg1".into(),
            index: i,
            speaker_id: if i % 2 == 0 { "Ross" } else { "Rachel" }.into(),
            transcript: format!("line number {i}, I am so happy"),
            label: Some(0),
            media: MediaRefs::default(),
            audio_descriptors: None,
            allow_empty_transcript: false,
        })
        .collect();
    Conversation {
        conv_id: "dlg1".into(),
        split: Split::Train,
        utterances,
    }
}

fn bundle(i: usize) -> PromptBundle {
    build_prompt_bundle(
        &conversation(),
        i,
        16,
        &PromptTemplates::bundled(),
        &VadLexicon::bundled(),
        &PromptConfig::default(),
    )
    .unwrap()
}

fn client(url: String) -> EmbeddingClient {
    EmbeddingClient::new(EndpointConfig {
        url,
        timeout_ms: 5_000,
        max_retries: 3,
        backoff_base_ms: 1,
    })
}

fn frames() -> Vec<Vec<u8>> {
    vec![b"frame-a".to_vec(), b"frame-b".to_vec()]
}

#[test]
fn fixed_vector_passes_through() {
    let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let reply = v.clone();
    let server = MockEmbeddingServer::start(move |_, _| MockReply::Embedding(reply.clone())).unwrap();
    let rec = extract_remote(&bundle(1), &frames(), b"ref", &client(server.url()), None).unwrap();
    assert_eq!(rec.vector, v.iter().map(|&x| x as f32).collect::<Vec<_>>());
    assert_eq!(rec.provider, Provider::Remote);
    assert_eq!(rec.key.modality, Modality::Visual);
    assert_eq!((rec.key.conv_id.as_str(), rec.key.index), ("dlg1", 1));
    assert!(!rec.corrupted);
}

#[test]
fn request_body_follows_protocol() {
    let seen: Arc<Mutex<Vec<EmbedRequest>>> = Arc::default();
    let log = seen.clone();
    let server = MockEmbeddingServer::start(move |_, req| {
        log.lock().unwrap().push(req.clone());
        MockReply::Embedding(vec![0.5; 4])
    })
    .unwrap();
    let b = bundle(2);
    extract_remote(&b, &frames(), b"ref", &client(server.url()), None).unwrap();
    let reqs = seen.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0], EmbedRequest::new(&frames(), b"ref", &b.composed));
    assert_eq!(reqs[0].frames[0], "ZnJhbWUtYQ==");
}

#[test]
fn retries_then_succeeds() {
    let server = MockEmbeddingServer::start(|n, _| {
        if n < 2 {
            MockReply::Status(503, "warming up".into())
        } else {
            MockReply::Embedding(vec![1.0; 8])
        }
    })
    .unwrap();
    let c = client(server.url());
    let rec = extract_remote(&bundle(0), &frames(), b"", &c, Some(8)).unwrap();
    assert_eq!(rec.dim(), 8);
    assert_eq!(server.request_count(), 3);
    assert_eq!(c.requests_sent(), 3);
}

#[test]
fn retry_budget_is_finite() {
    let server = MockEmbeddingServer::start(|_, _| MockReply::Status(500, "down".into())).unwrap();
    let c = client(server.url());
    let err = extract_remote(&bundle(0), &frames(), b"", &c, None).unwrap_err();
    assert!(matches!(err, Error::Remote(_)));
    assert_eq!(server.request_count(), 4);
}

#[test]
fn client_errors_are_not_retried_and_echo_the_body() {
    let server = MockEmbeddingServer::start(|_, _| MockReply::Status(400, "prompt too long".into())).unwrap();
    let err = extract_remote(&bundle(0), &frames(), b"", &client(server.url()), None).unwrap_err();
    assert!(err.to_string().contains("prompt too long"), "{err}");
    assert_eq!(server.request_count(), 1);
}

#[test]
fn dim_mismatch_leaves_cache_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("visual.vaff");
    let cache = FeatureCache::create(&path, 8, Modality::Visual).unwrap();
    let before = std::fs::read(&path).unwrap();
    let server = MockEmbeddingServer::start(|_, _| MockReply::Embedding(vec![0.1; 7])).unwrap();
    let err = extract_remote(&bundle(0), &frames(), b"", &client(server.url()), Some(cache.dim())).unwrap_err();
    assert!(matches!(err, Error::DimMismatch { expected: 8, found: 7 }), "{err}");
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(FeatureCache::open(&path).unwrap().len(), 0);
}

#[test]
fn declared_dim_must_match_payload() {
    let server = MockEmbeddingServer::start(|_, _| MockReply::Declared {
        embedding: vec![0.0; 5],
        dim: 6,
    })
    .unwrap();
    assert!(extract_remote(&bundle(0), &frames(), b"", &client(server.url()), None).is_err());
}

#[test]
fn overflowing_embedding_is_rejected() {
    let server = MockEmbeddingServer::start(|_, _| MockReply::Embedding(vec![1.0, 1e300, 0.0])).unwrap();
    let err = extract_remote(&bundle(0), &frames(), b"", &client(server.url()), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn empty_frames_issue_no_request() {
    let server = MockEmbeddingServer::start(|_, _| MockReply::Embedding(vec![0.0; 2])).unwrap();
    assert!(extract_remote(&bundle(0), &[], b"", &client(server.url()), None).is_err());
    assert_eq!(server.request_count(), 0);
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let url = {
        let s = MockEmbeddingServer::start(|_, _| MockReply::Embedding(vec![0.0])).unwrap();
        s.url()
    };
    let c = EmbeddingClient::new(EndpointConfig {
        url,
        timeout_ms: 500,
        max_retries: 1,
        backoff_base_ms: 1,
    });
    let err = extract_remote(&bundle(0), &frames(), b"", &c, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(c.requests_sent(), 2);
}

#[test]
fn resume_with_full_cache_sends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("visual.vaff");
    let server = MockEmbeddingServer::start(|_, req| MockReply::hashed(&req.prompt, 8)).unwrap();
    let c = client(server.url());
    let conv = conversation();
    let mut cache = FeatureCache::create(&path, 8, Modality::Visual).unwrap();
    for i in 0..conv.len() {
        cache
            .put(extract_remote(&bundle(i), &frames(), b"", &c, Some(8)).unwrap())
            .unwrap();
    }
    assert_eq!(server.request_count(), 3);
    drop(cache);

    let cache = FeatureCache::open(&path).unwrap();
    let mut issued = 0;
    for i in 0..conv.len() {
        if !cache.contains_utterance(&conv.conv_id, i) {
            extract_remote(&bundle(i), &frames(), b"", &c, Some(8)).unwrap();
            issued += 1;
        }
    }
    assert_eq!(issued, 0);
    assert_eq!(server.request_count(), 3);
    // hashed replies are a pure function of the prompt
    let again = extract_remote(&bundle(1), &frames(), b"", &c, Some(8)).unwrap();
    assert_eq!(cache.get_utterance("dlg1", 1).unwrap().vector, again.vector);
}

#[test]
fn env_var_overrides_endpoint() {
    // the only test touching the variable
    std::env::set_var("VISAFF_ENDPOINT", "http://10.0.0.1:9");
    let cfg = EndpointConfig::default().with_env_override();
    std::env::remove_var("VISAFF_ENDPOINT");
    assert_eq!(cfg.url, "http://10.0.0.1:9");
}
