//! Built-in `demo` target module, the program `hiq run` traces when no other
//! target is linked in.

use std::time::Duration;

use hiq_core::runtime::{Raised, Runtime, Value};
use serde_json::json;

fn arg_u64(args: &[Value], i: usize, default: u64) -> Result<u64, Raised> {
    match args.get(i) {
        None => Ok(default),
        Some(Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| Raised::new("ValueError", format!("expected a non-negative integer, got {n}"))),
        Some(Value::String(s)) => s
            .parse()
            .map_err(|_| Raised::new("ValueError", format!("invalid literal for int(): '{s}'"))),
        Some(other) => Err(Raised::new("TypeError", format!("expected an integer, got {other}"))),
    }
}

fn sleep_ms(ms: u64) {
    std::thread::sleep(Duration::from_millis(ms));
}

/// Registers the `demo` module on `rt`:
///
/// - `main()` prints two lines around `func1(3)` and `func2(4)`.
/// - `func1(n)` sleeps 2 ms and calls `func2(n)`; `func2(n)` sleeps 1 ms.
/// - `headline([ms])` calls `step(ms)` four times (default 1000 ms).
/// - `exit_with(code)` raises `SystemExit(code)`; `fail()` raises `ValueError`.
pub fn register(rt: &Runtime) {
    rt.register_module("demo", |m| {
        m.def("main", &["*argv"], |rt, args| {
            rt.print(&format!("demo: start ({} args)", args.len()));
            let a = rt.call("demo", "func1", &[json!(3)])?;
            let b = rt.call("demo", "func2", &[json!(4)])?;
            rt.print(&format!("demo: done {a} {b}"));
            Ok(Value::Null)
        });
        m.def("func1", &["n"], |rt, args| {
            sleep_ms(2);
            rt.call("demo", "func2", args)
        });
        m.def("func2", &["n"], |_, args| {
            sleep_ms(1);
            Ok(json!(arg_u64(args, 0, 0)? * 2))
        });
        m.def("headline", &["ms"], |rt, args| {
            let ms = arg_u64(args, 0, 1000)?;
            for _ in 0..4 {
                rt.call("demo", "step", &[json!(ms)])?;
            }
            Ok(Value::Null)
        });
        m.def("step", &["ms"], |_, args| {
            sleep_ms(arg_u64(args, 0, 0)?);
            Ok(Value::Null)
        });
        m.def("exit_with", &["code"], |rt, args| {
            let code = arg_u64(args, 0, 0)?;
            rt.print(&format!("exiting with {code}"));
            Err(Raised::system_exit(code as i32))
        });
        m.def("fail", &[], |rt, _| {
            rt.call("demo", "func2", &[json!(1)])?;
            Err(Raised::new("ValueError", "demo failure"))
        });
    });
}
