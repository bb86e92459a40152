use std::io::{self, Write};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use kgdialog_cli::config::keys_help;
use kgdialog_cli::{cmd_chat, cmd_eval, cmd_inspect, cmd_synth, cmd_train, exit_code, Cli, Command};

fn main() -> ExitCode {
    let keys = keys_help();
    let matches = Cli::command()
        .after_help(keys.clone())
        .mut_subcommand("train", |c| c.after_help(keys.clone()))
        .mut_subcommand("eval", |c| c.after_help(keys.clone()))
        .mut_subcommand("chat", |c| c.after_help(keys))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|s| {
            println!(
                "wrote {} (best epoch {}, valid loss {:.4}, {} steps)",
                s.checkpoint.display(),
                s.best_epoch,
                s.best_valid_loss,
                s.steps
            );
        }),
        Command::Eval(args) => cmd_eval(args, &mut out).map(|written| {
            for (path, _) in written {
                eprintln!("wrote {}", path.display());
            }
        }),
        Command::Inspect(args) => cmd_inspect(args, &mut out),
        Command::Chat(args) => cmd_chat(args, &mut io::stdin().lock(), &mut out),
        Command::Synth(args) => cmd_synth(args).map(|counts| {
            for (split, n) in counts {
                println!("{split}: {n} dialogues -> {}", args.out.join(format!("{split}.json")).display());
            }
        }),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
