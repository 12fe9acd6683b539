/**
 * Runs one exec request in a fresh python3 subprocess.
 *
 * The driver gets the request on stdin and replies on fd 3; stdout belongs
 * to user code and is never trusted. The wall-clock timeout lives here, not
 * in the driver, so even a C-level hang gets killed on time.
 */

import { spawn } from "node:child_process";
import * as fs from "node:fs";
import * as path from "node:path";

import { ExecRequest, ExecResponse, errorResponse } from "./protocol";

export const DEFAULT_HARD_TIMEOUT_CAP_S = 60;

const DRIVER_PATH = path.join(__dirname, "..", "driver.py");

export interface RunnerOptions {
  pythonBin?: string;
  hardTimeoutCapS?: number;
  /** When set, requests whose workspace lies outside this directory are rejected. */
  workspaceRoot?: string;
  /** Passthrough endpoints fixture tools are allowed to call. */
  allowedEndpoints?: string[];
}

export function runExec(
  request: ExecRequest,
  options: RunnerOptions = {},
): Promise<ExecResponse> {
  const cap = options.hardTimeoutCapS ?? DEFAULT_HARD_TIMEOUT_CAP_S;
  if (request.timeout_s > cap) {
    return Promise.resolve(
      errorResponse(
        request.request_id,
        "invalid-request",
        `timeout_s ${request.timeout_s} exceeds the hard cap ${cap}`,
      ),
    );
  }

  const workspace = path.resolve(request.workspace);
  if (options.workspaceRoot) {
    const root = path.resolve(options.workspaceRoot);
    if (workspace !== root && !workspace.startsWith(root + path.sep)) {
      return Promise.resolve(
        errorResponse(
          request.request_id,
          "invalid-request",
          `workspace ${request.workspace} is outside the configured root`,
        ),
      );
    }
  }
  fs.mkdirSync(workspace, { recursive: true });

  return new Promise<ExecResponse>((resolve) => {
    const started = process.hrtime.bigint();
    const elapsedMs = () => Number((process.hrtime.bigint() - started) / 1_000_000n);

    const child = spawn(options.pythonBin ?? "python3", [DRIVER_PATH], {
      cwd: workspace,
      stdio: ["pipe", "ignore", "pipe", "pipe"],
    });

    let stderr = "";
    let reply = "";
    child.stderr!.on("data", (chunk: Buffer) => {
      stderr += chunk.toString("utf-8");
    });
    (child.stdio[3] as NodeJS.ReadableStream).on("data", (chunk: Buffer) => {
      reply += chunk.toString("utf-8");
    });

    let timedOut = false;
    const timer = setTimeout(() => {
      timedOut = true;
      child.kill("SIGKILL");
    }, request.timeout_s * 1000);

    child.on("error", (err) => {
      clearTimeout(timer);
      resolve(errorResponse(request.request_id, "spawn-failure", String(err)));
    });

    child.on("close", () => {
      clearTimeout(timer);
      if (timedOut) {
        resolve({
          request_id: request.request_id,
          status: "timeout",
          output: "",
          error_kind: "timeout",
          error_message: `execution exceeded ${request.timeout_s}s`,
          duration_ms: elapsedMs(),
        });
        return;
      }
      const line = reply.trim();
      if (!line) {
        const hint = stderr ? `: ${stderr.slice(0, 400)}` : "";
        resolve(
          errorResponse(
            request.request_id,
            "driver-failure",
            `driver exited without a reply${hint}`,
          ),
        );
        return;
      }
      let parsed: Record<string, unknown>;
      try {
        parsed = JSON.parse(line) as Record<string, unknown>;
      } catch {
        resolve(
          errorResponse(
            request.request_id,
            "driver-failure",
            `driver reply was not JSON: ${line.slice(0, 200)}`,
          ),
        );
        return;
      }
      resolve({
        request_id:
          typeof parsed.request_id === "string" && parsed.request_id
            ? parsed.request_id
            : request.request_id,
        status: parsed.status as ExecResponse["status"],
        output: typeof parsed.output === "string" ? parsed.output : "",
        error_kind: (parsed.error_kind as string | null) ?? null,
        error_message: (parsed.error_message as string | null) ?? null,
        duration_ms:
          typeof parsed.duration_ms === "number" ? parsed.duration_ms : elapsedMs(),
      });
    });

    const payload = {
      request_id: request.request_id,
      profile: request.profile,
      prefix_codes: request.prefix_codes,
      candidate_code: request.candidate_code,
      tool_fixtures: request.tool_fixtures,
      workspace,
      allowed_endpoints: options.allowedEndpoints ?? [],
    };
    child.stdin!.write(JSON.stringify(payload));
    child.stdin!.end();
  });
}
