use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use panel_triage_service::{router, AppState, Store, ADDR_ENV, DATA_DIR_ENV, TOKEN_ENV};

const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[tokio::main]
async fn main() -> ExitCode {
    let addr: SocketAddr = match std::env::var(ADDR_ENV)
        .unwrap_or_else(|_| DEFAULT_ADDR.into())
        .parse()
    {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {ADDR_ENV}: {e}");
            return ExitCode::from(2);
        }
    };
    let store = match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => match Store::open(&PathBuf::from(dir)) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => {
            eprintln!("warning: {DATA_DIR_ENV} is not set; datasets are kept in memory only");
            Store::in_memory()
        }
    };
    let token = std::env::var(TOKEN_ENV).ok();
    if token.is_none() {
        eprintln!("warning: {TOKEN_ENV} is not set; requests are not authenticated");
    }
    let app = router(AppState::new(store, token));
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: bind {addr}: {e}");
            return ExitCode::from(1);
        }
    };
    eprintln!("listening on {addr}");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
