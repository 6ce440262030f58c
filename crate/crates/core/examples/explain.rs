//! Serves explanations over HTTP. Trains a quick classifier and masker,
//! sends one `/api/explain` request through the router in-process and
//! prints the response. With `--serve` it listens on `FASTSAL_PORT`
//! (default 8080) instead.
//!
//! Usage: `cargo run --release --example explain [-- --serve]`

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

use fastsal::blackbox::{train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};
use fastsal::masker::{Masker, MaskerConfig};
use fastsal::service::{default_port, router, serve, ExplainResponse, ServiceState};
use fastsal::trainer::{train, TrainConfig, TrainOutputs};

#[tokio::main]
async fn main() -> fastsal::Result<()> {
    let data = generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 40, seed: 1, ..Default::default() })?;
    let model = train_classifier(&data, &ClassifierTrainConfig { epochs: 4, ..Default::default() }, None)?.model;
    let masker = Masker::new(MaskerConfig::cifar(3), data.class_names.clone(), 0)?;
    let cfg = TrainConfig { epochs: 1, batch_size: 16, ..Default::default() };
    train(&masker, &data, &model, &cfg, &TrainOutputs::default())?;

    let state = Arc::new(ServiceState::new(Arc::new(masker), Arc::new(model), data.class_names.clone())?);
    if std::env::args().any(|a| a == "--serve") {
        let addr = ([127, 0, 0, 1], default_port()).into();
        println!("listening on http://{addr}");
        return serve(state, addr).await;
    }

    let body = serde_json::json!({ "image": STANDARD.encode(data.images[0].encode_png()?), "threshold": 0.5 });
    let req = Request::post("/api/explain")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .expect("valid request");
    let resp = router(state).oneshot(req).await.expect("infallible");
    println!("status {}", resp.status());
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    let r: ExplainResponse = serde_json::from_slice(&bytes)?;
    println!(
        "class {} ({}), crop {:?}, area {:.3}, p(full) {:.3}, p(crop) {:.3}, metric {:.3}, {:.1} ms",
        r.class_id, r.class_name, r.crop, r.area_fraction, r.class_prob_full, r.class_prob_crop, r.saliency_metric, r.timing_ms
    );
    Ok(())
}
