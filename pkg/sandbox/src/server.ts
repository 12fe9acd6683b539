/**
 * NDJSON-over-unix-socket front end: {"op": "exec", ...} runs code through
 * the worker pool, {"op": "health"} answers immediately.
 */

import * as fs from "node:fs";
import * as net from "node:net";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { WorkerPool } from "./pool";
import {
  EXEC_PROFILES,
  HealthResponse,
  errorResponse,
  requestSchema,
} from "./protocol";
import { DEFAULT_HARD_TIMEOUT_CAP_S, RunnerOptions, runExec } from "./runner";

export const VERSION = "sandbox-1";

export interface ServerOptions extends RunnerOptions {
  socketPath: string;
  workers?: number;
}

export interface RunningServer {
  socketPath: string;
  close(): Promise<void>;
}

export async function startServer(options: ServerOptions): Promise<RunningServer> {
  const pool = new WorkerPool(options.workers ?? 4);
  const startedAt = process.hrtime.bigint();

  const health = (): HealthResponse => ({
    version: VERSION,
    uptime_s: Number(process.hrtime.bigint() - startedAt) / 1e9,
    profiles: [...EXEC_PROFILES],
  });

  const handleLine = async (line: string): Promise<unknown> => {
    let raw: unknown;
    try {
      raw = JSON.parse(line);
    } catch {
      return errorResponse("", "invalid-request", "request line is not valid JSON");
    }
    const parsed = requestSchema.safeParse(raw);
    if (!parsed.success) {
      const id = (raw as { request_id?: unknown })?.request_id;
      const detail = parsed.error.issues
        .map((issue) => `${issue.path.join(".") || "request"}: ${issue.message}`)
        .join("; ");
      return errorResponse(typeof id === "string" ? id : "", "invalid-request", detail);
    }
    const data = parsed.data;
    if (data.op === "health") {
      return health();
    }
    return pool.run(() => runExec(data, options));
  };

  // a stale socket file from a previous run would block listen()
  try {
    fs.unlinkSync(options.socketPath);
  } catch {
    // nothing to clean up
  }

  const server = net.createServer((conn) => {
    let buffer = "";
    conn.on("data", (chunk) => {
      buffer += chunk.toString("utf-8");
      for (let nl = buffer.indexOf("\n"); nl !== -1; nl = buffer.indexOf("\n")) {
        const line = buffer.slice(0, nl).trim();
        buffer = buffer.slice(nl + 1);
        if (!line) continue;
        void handleLine(line)
          .then((response) => conn.write(JSON.stringify(response) + "\n"))
          .catch((err) =>
            conn.write(
              JSON.stringify(errorResponse("", "internal", String(err))) + "\n",
            ),
          );
      }
    });
    conn.on("error", () => {
      // client went away mid-request; the worker finishes on its own
    });
  });

  await new Promise<void>((resolve, reject) => {
    server.once("error", reject);
    server.listen(options.socketPath, resolve);
  });

  return {
    socketPath: options.socketPath,
    close: () =>
      new Promise<void>((resolve) => {
        server.close(() => resolve());
      }),
  };
}

function main(): void {
  const argv = yargs(hideBin(process.argv))
    .option("socket", {
      type: "string",
      demandOption: true,
      describe: "unix socket path to listen on",
    })
    .option("workers", {
      type: "number",
      default: 4,
      describe: "max concurrent executions",
    })
    .option("hard-cap", {
      type: "number",
      default: DEFAULT_HARD_TIMEOUT_CAP_S,
      describe: "upper bound on per-request timeout_s",
    })
    .option("workspace-root", {
      type: "string",
      describe: "reject workspaces outside this directory",
    })
    .option("allow-endpoint", {
      type: "array",
      default: [] as string[],
      describe: "passthrough endpoints fixture tools may call",
    })
    .strict()
    .parseSync();

  startServer({
    socketPath: argv.socket,
    workers: argv.workers,
    hardTimeoutCapS: argv["hard-cap"],
    workspaceRoot: argv["workspace-root"],
    allowedEndpoints: (argv["allow-endpoint"] as unknown[]).map(String),
  })
    .then((running) => {
      console.log(`listening on ${running.socketPath}`);
      const stop = () => {
        void running.close().then(() => process.exit(0));
      };
      process.on("SIGINT", stop);
      process.on("SIGTERM", stop);
    })
    .catch((err) => {
      console.error(err);
      process.exit(1);
    });
}

if (require.main === module) {
  main();
}
