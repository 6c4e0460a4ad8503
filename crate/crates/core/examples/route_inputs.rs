//! Parses noisy router replies, then measures router accuracy with a
//! scripted base model.
//!
//!     cargo run --example route_inputs

use culture_manager::backend::mock::ScriptedChat;
use culture_manager::model::CultureId;
use culture_manager::prompts::Templates;
use culture_manager::router::{parse_route, router_accuracy};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cultures = vec![CultureId::new("Arabic")?, CultureId::new("Turkish")?];
    for raw in ["Turkish", "\"arabic\".", "The text is Turkish.", "Arabic or Turkish", "French"] {
        let (lenient, kind) = parse_route(raw, &cultures, false);
        let (strict, _) = parse_route(raw, &cultures, true);
        println!("{raw:<22} -> {:<8} ({kind:?}); strict -> {}", lenient.name(), strict.name());
    }

    let items = vec![
        ("Bugün hava çok güzel".to_string(), cultures[1].clone()),
        ("صباح الخير يا جماعة".to_string(), cultures[0].clone()),
        ("Çay demlendi mi?".to_string(), cultures[1].clone()),
        ("الأكل كان لذيذ جدا".to_string(), cultures[0].clone()),
    ];
    let t = Templates::embedded();
    let replies = ["Turkish", "Arabic", "Others", "arabic"];
    let mut chat = ScriptedChat::new();
    for ((text, _), reply) in items.iter().zip(replies) {
        chat = chat.with_reply(&t.router(&cultures, text)?.text, reply);
    }
    let report = router_accuracy(&items, &cultures, &chat, t, "llama-3.1-8b-instruct", false).await?;
    print!("{}", report.to_text());
    Ok(())
}
