//! WebSocket transport around [`ServiceState`]: one worker per connection,
//! messages handled in order, queued drags coalesced latest-wins.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use vsub_core::service::{coalesce, Incoming, ModelCatalog, ModelInfo, Reply, ServiceState};

use crate::CliError;

/// Uploaded containers arrive as a single binary message.
const MAX_MESSAGE: usize = 512 << 20;

pub fn router(catalog: Arc<ModelCatalog>) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/ws", get(upgrade))
        .with_state(catalog)
}

async fn models(State(catalog): State<Arc<ModelCatalog>>) -> Json<Vec<ModelInfo>> {
    Json(tokio::task::spawn_blocking(move || catalog.list()).await.unwrap_or_default())
}

async fn upgrade(
    ws: WebSocketUpgrade,
    Query(q): Query<HashMap<String, String>>,
    State(catalog): State<Arc<ModelCatalog>>,
) -> Response {
    let full = q.get("full").is_some_and(|v| v == "1" || v == "true");
    ws.max_message_size(MAX_MESSAGE)
        .on_upgrade(move |socket| connection(socket, catalog, full))
}

async fn connection(socket: WebSocket, catalog: Arc<ModelCatalog>, full: bool) {
    let (mut sink, mut stream) = socket.split();
    let (queue, mut inbox) = mpsc::unbounded_channel::<Incoming>();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            let incoming = match msg {
                Message::Text(t) => Incoming::from_text(t.as_str()),
                Message::Binary(b) => Incoming::Upload(b.to_vec()),
                Message::Close(_) => break,
                Message::Ping(_) | Message::Pong(_) => continue,
            };
            if queue.send(incoming).is_err() {
                break;
            }
        }
    });

    let mut state = Some(ServiceState::new(catalog, full));
    'conn: while let Some(first) = inbox.recv().await {
        let mut batch = vec![first];
        while let Ok(more) = inbox.try_recv() {
            batch.push(more);
        }
        for (msg, folded) in coalesce(batch) {
            let mut st = state.take().expect("state returned by previous message");
            let joined = tokio::task::spawn_blocking(move || {
                let replies = st.handle(msg, folded);
                (st, replies)
            })
            .await;
            let Ok((st, replies)) = joined else {
                log::error!("session worker panicked; closing connection");
                break 'conn;
            };
            state = Some(st);
            for r in replies {
                let frame = match r {
                    Reply::Text(t) => Message::Text(t.into()),
                    Reply::Binary(b) => Message::Binary(b.into()),
                };
                if sink.send(frame).await.is_err() {
                    break 'conn;
                }
            }
        }
    }
    reader.abort();
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve(listener: TcpListener, catalog: Arc<ModelCatalog>) -> std::io::Result<()> {
    axum::serve(listener, router(catalog)).await
}

pub fn run_blocking(host: &str, port: u16) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Parse(format!("bad listen address {host}:{port}: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(std::path::Path::new("<runtime>"), e))?;
    rt.block_on(async {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::io(std::path::Path::new(&addr.to_string()), e))?;
        log::info!("listening on ws://{}/ws", listener.local_addr().map_err(|e| CliError::io(std::path::Path::new("<socket>"), e))?);
        eprintln!("vsub serving on http://{addr} (WebSocket at /ws, models at /models)");
        serve(listener, Arc::new(ModelCatalog::bundled()))
            .await
            .map_err(|e| CliError::io(std::path::Path::new(&addr.to_string()), e))
    })
}
