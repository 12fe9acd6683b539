/**
 * Wire types for the NDJSON protocol: one JSON object per line, request in,
 * response out. Field names match the primary-side client exactly.
 */

import { z } from "zod";

export const EXEC_PROFILES = ["agent", "filegen"] as const;

export const execRequestSchema = z.object({
  op: z.literal("exec"),
  request_id: z.string().min(1),
  profile: z.enum(EXEC_PROFILES),
  prefix_codes: z.array(z.string()).default([]),
  candidate_code: z.string(),
  tool_fixtures: z.record(z.record(z.unknown())).default({}),
  timeout_s: z.number().positive().finite(),
  workspace: z.string().min(1),
});

export const healthRequestSchema = z.object({
  op: z.literal("health"),
});

export const requestSchema = z.discriminatedUnion("op", [
  execRequestSchema,
  healthRequestSchema,
]);

export type ExecRequest = z.infer<typeof execRequestSchema>;
export type HealthRequest = z.infer<typeof healthRequestSchema>;

export type ExecStatus = "ok" | "error" | "timeout";

export interface ExecResponse {
  request_id: string;
  status: ExecStatus;
  output: string;
  error_kind: string | null;
  error_message: string | null;
  duration_ms: number;
}

export interface HealthResponse {
  version: string;
  uptime_s: number;
  profiles: string[];
}

export function errorResponse(
  requestId: string,
  kind: string,
  message: string,
): ExecResponse {
  return {
    request_id: requestId,
    status: "error",
    output: "",
    error_kind: kind,
    error_message: message,
    duration_ms: 0,
  };
}
