import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { ExecRequest } from "../src/protocol";
import { RunnerOptions, runExec } from "../src/runner";

let counter = 0;

function freshWorkspace(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "sbx-test-"));
}

function request(code: string, overrides: Partial<ExecRequest> = {}): ExecRequest {
  counter += 1;
  return {
    op: "exec",
    request_id: `t-${counter}`,
    profile: "agent",
    prefix_codes: [],
    candidate_code: code,
    tool_fixtures: {},
    timeout_s: 10,
    workspace: freshWorkspace(),
    ...overrides,
  };
}

describe("basic execution", () => {
  it("captures print output", async () => {
    const res = await runExec(request("print(2 + 2)"));
    expect(res.status).toBe("ok");
    expect(res.output).toBe("4");
    expect(res.error_kind).toBeNull();
  });

  it("echoes bare expression values like a REPL", async () => {
    const res = await runExec(request("x = 5\nx * 3"));
    expect(res.status).toBe("ok");
    expect(res.output).toBe("15");
  });

  it("echoes the request_id", async () => {
    const req = request("print('hi')");
    const res = await runExec(req);
    expect(res.request_id).toBe(req.request_id);
  });

  it("returns final_answer's value through the echo", async () => {
    const res = await runExec(request("final_answer('1994')"));
    expect(res.status).toBe("ok");
    expect(res.output).toBe("1994");
  });

  it("reports syntax errors", async () => {
    const res = await runExec(request("def ("));
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("syntax-error");
  });

  it("reports unbound names as name-resolution errors", async () => {
    const res = await runExec(request("catalog_lookup('x')"));
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("name-resolution");
    expect(res.error_message).toContain("catalog_lookup");
  });
});

describe("prefix replay", () => {
  it("keeps prefix state visible to the candidate", async () => {
    const res = await runExec(
      request("print(x * 2)", { prefix_codes: ["x = 21"] }),
    );
    expect(res.status).toBe("ok");
    expect(res.output).toBe("42");
  });

  it("suppresses prefix output", async () => {
    const res = await runExec(
      request("print('candidate only')", {
        prefix_codes: ["print('prefix noise')", "y = 1"],
      }),
    );
    expect(res.status).toBe("ok");
    expect(res.output).toBe("candidate only");
  });

  it("flags a failing prefix with its own error kind", async () => {
    const res = await runExec(
      request("print('never runs')", { prefix_codes: ["boom('x')"] }),
    );
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("prefix_failure");
    expect(res.error_message).toContain("prefix code 1");
  });
});

describe("tool fixtures", () => {
  const fixtures = {
    search: { "query='cats'": "three cats found", "*": "no results" },
    strict: { "'a'": "A" },
  };

  it("resolves an exact argument key", async () => {
    const res = await runExec(
      request("print(search(query='cats'))", { tool_fixtures: fixtures }),
    );
    expect(res.output).toBe("three cats found");
  });

  it("falls back to the star default", async () => {
    const res = await runExec(
      request("print(search(query='dogs'))", { tool_fixtures: fixtures }),
    );
    expect(res.output).toBe("no results");
  });

  it("misses deterministically without a default", async () => {
    const res = await runExec(
      request("strict('b')", { tool_fixtures: fixtures }),
    );
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("fixture-miss");
    expect(res.error_message).toContain("strict('b')");
  });

  it("keeps the built-in final_answer even when a fixture claims the name", async () => {
    // registries ship final_answer as a tool entry; the echo must still win
    const res = await runExec(
      request("final_answer('1994')", { tool_fixtures: { final_answer: {} } }),
    );
    expect(res.status).toBe("ok");
    expect(res.output).toBe("1994");
  });

  it("blocks passthrough endpoints that are not allow-listed", async () => {
    const res = await runExec(
      request("remote('x')", {
        tool_fixtures: { remote: { endpoint: "http://example.test/hook" } },
      }),
    );
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("endpoint-blocked");
  });
});

describe("isolation", () => {
  it("allows writes inside the workspace", async () => {
    const req = request(
      "with open('note.txt', 'w') as fh:\n    fh.write('kept')\nprint('written')",
    );
    const res = await runExec(req);
    expect(res.status).toBe("ok");
    expect(fs.readFileSync(path.join(req.workspace, "note.txt"), "utf-8")).toBe("kept");
  });

  it("rejects absolute paths outside the workspace", async () => {
    const res = await runExec(request("open('/etc/passwd').read()"));
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("isolation");
  });

  it("rejects relative escapes from the workspace", async () => {
    const res = await runExec(
      request("open('../../escape.txt', 'w').write('x')"),
    );
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("isolation");
  });

  it("blocks the socket module", async () => {
    const res = await runExec(request("import socket\nsocket.socket()"));
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("import-blocked");
  });

  it("blocks subprocess in every profile", async () => {
    for (const profile of ["agent", "filegen"] as const) {
      const res = await runExec(request("import subprocess", { profile }));
      expect(res.status).toBe("error");
      expect(res.error_kind).toBe("import-blocked");
    }
  });

  it("allows the shared stdlib subset", async () => {
    const res = await runExec(request("import math\nprint(math.floor(2.9))"));
    expect(res.status).toBe("ok");
    expect(res.output).toBe("2");
  });

  it("gives filegen its extra modules without leaking them to agent", async () => {
    const ok = await runExec(request("import csv\nprint('csv ok')", { profile: "filegen" }));
    expect(ok.status).toBe("ok");
    const blocked = await runExec(request("import csv", { profile: "agent" }));
    expect(blocked.status).toBe("error");
    expect(blocked.error_kind).toBe("import-blocked");
  });
});

describe("timeouts and limits", () => {
  it(
    "kills an infinite loop at the requested wall clock",
    async () => {
      const started = Date.now();
      const res = await runExec(request("while True: pass", { timeout_s: 2 }));
      const elapsedS = (Date.now() - started) / 1000;
      expect(res.status).toBe("timeout");
      expect(res.error_kind).toBe("timeout");
      expect(res.error_message).toContain("2");
      expect(elapsedS).toBeGreaterThan(1.5);
      expect(elapsedS).toBeLessThan(2.5);
    },
    10_000,
  );

  it("rejects a timeout above the hard cap before spawning", async () => {
    const res = await runExec(request("print('x')", { timeout_s: 120 }));
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("invalid-request");
  });

  it("rejects workspaces outside the configured root", async () => {
    const options: RunnerOptions = { workspaceRoot: freshWorkspace() };
    const res = await runExec(request("print('x')"), options);
    expect(res.status).toBe("error");
    expect(res.error_kind).toBe("invalid-request");
    expect(res.error_message).toContain("outside");
  });
});

describe("replay determinism", () => {
  it(
    "returns identical results over 100 repeated execs of pure fixture tools",
    async () => {
      const req = request(
        "a = lookup('k1')\nb = lookup('k2')\nprint(a, b, 6 * 7)",
        {
          prefix_codes: ["seenonce = lookup('k1')"],
          tool_fixtures: { lookup: { "'k1'": "alpha", "'k2'": "beta" } },
        },
      );
      const first = await runExec(req);
      expect(first.status).toBe("ok");
      expect(first.output).toBe("alpha beta 42");
      for (let i = 0; i < 99; i++) {
        const again = await runExec({ ...req, request_id: `replay-${i}` });
        expect([again.status, again.output, again.error_kind, again.error_message]).toEqual(
          [first.status, first.output, first.error_kind, first.error_message],
        );
      }
    },
    120_000,
  );
});
