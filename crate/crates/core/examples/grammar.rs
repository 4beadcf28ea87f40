//! Parse, validate and render commands against the shipped catalog.
//!
//!     cargo run --example grammar -- "list users --active 20240801 20240901"

use netword::corpus::ClassCatalog;
use netword::grammar;

fn main() {
    let catalog = ClassCatalog::default_catalog();
    let inputs: Vec<String> = std::env::args().skip(1).collect();
    let inputs = if inputs.is_empty() {
        vec![
            "list users --active 20240801 20240901".to_string(),
            "list users \u{2014}active now".to_string(),
            "user add --imsi 208930000000001".to_string(),
            "list users --active 20230229 now".to_string(),
            "list users --active 20240901 20240801".to_string(),
            "list routers".to_string(),
        ]
    } else {
        inputs
    };

    for text in &inputs {
        let verb = grammar::tokenize(&grammar::canonicalize(text))
            .into_iter()
            .next()
            .unwrap_or_default();
        let Some(class) = catalog
            .classes
            .iter()
            .find(|c| grammar::verbs(c).contains(&verb.as_str()))
        else {
            println!("{text:?}\n  no class uses verb {verb:?}\n");
            continue;
        };
        println!("{text:?}  (class {})", class.name);
        match grammar::parse(text, class) {
            Ok(ast) => {
                println!("  canonical: {}", grammar::render(&ast));
                for f in &ast.flags {
                    let kinds: Vec<String> = f.args.iter().map(|a| a.kind.to_string()).collect();
                    println!("  flag {} [{}]", f.name, kinds.join(", "));
                }
            }
            Err(_) => {
                for v in grammar::validate(text, class).violations {
                    println!("  violation: {v}");
                }
            }
        }
        for w in grammar::validate(text, class).warnings {
            println!("  warning: {}", w.message);
        }
        println!();
    }
}
