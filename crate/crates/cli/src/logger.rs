use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};

/// JSON lines on stdout when verbose, plain warnings on stderr otherwise.
struct Logger {
    verbose: bool,
}

impl Log for Logger {
    fn enabled(&self, m: &Metadata) -> bool {
        if self.verbose {
            m.level() <= Level::Debug && m.target().starts_with("gls")
        } else {
            m.level() <= Level::Warn
        }
    }

    fn log(&self, r: &Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        if self.verbose {
            let line = serde_json::json!({
                "level": r.level().as_str().to_lowercase(),
                "target": r.target(),
                "message": r.args().to_string(),
            });
            let _ = writeln!(std::io::stdout().lock(), "{line}");
        } else {
            let _ = writeln!(std::io::stderr().lock(), "{}: {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {
        let _ = std::io::stdout().flush();
    }
}

pub fn init(verbose: bool) {
    // a second call in the same process keeps the first logger
    if log::set_boxed_logger(Box::new(Logger { verbose })).is_ok() {
        log::set_max_level(if verbose { LevelFilter::Debug } else { LevelFilter::Warn });
    }
}
