//! Serving the HTTP API over a simulated twin and calling it.
//!
//! cargo run --example serve_api

use std::sync::Arc;

use cbdt::api;
use cbdt::config::Config;
use cbdt::ops;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.server.api_token = Some("secret".into());
    let (twin, sim, clock) = ops::simulation(config)?;
    ops::run_simulation(&twin, &sim, &clock, None);
    let twin = Arc::new(twin);

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(async move {
        axum::serve(listener, api::router(twin))
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    println!("serving on {base}");

    let get = |path: &str| ureq::get(&format!("{base}{path}")).call();
    println!("health: {}", get("/health")?.into_string()?);
    let page: serde_json::Value = get("/jobs?limit=2&sort=desc")?.into_json()?;
    println!(
        "{} jobs, newest ids {}, {}",
        page["total_count"], page["jobs"][0]["job_id"], page["jobs"][1]["job_id"]
    );
    let series: serde_json::Value =
        get("/metrics/series?interval=daily&from=2024-01-01T00:00:00Z&to=2024-01-02T00:00:00Z")?
            .into_json()?;
    println!("day 1: {}", series[0]);

    match ureq::post(&format!("{base}/ingest/refresh")).call() {
        Err(ureq::Error::Status(code, r)) => {
            println!("refresh without token: {code} {}", r.into_string()?)
        }
        other => println!("unexpected: {other:?}"),
    }
    match get("/metrics/series?interval=daily&from=2024-01-02T00:00:00Z&to=2024-01-01T00:00:00Z") {
        Err(ureq::Error::Status(code, r)) => {
            println!("inverted range: {code} {}", r.into_string()?)
        }
        other => println!("unexpected: {other:?}"),
    }

    let _ = stop.send(());
    rt.block_on(server)??;
    Ok(())
}
