/** Wire types mirroring the daemon's JSON payloads. */

export interface StatusSnapshot {
  food_percent: number | null;
  food_status: "low" | "adequate" | null;
  presence: boolean;
  water_dispensed_today_ml: number;
  food_dispensed_today_g: number;
  last_dispense: Record<string, unknown> | null;
  schedule_version: number;
  uptime_s: number;
}

export type EventKind =
  | "food_level"
  | "presence"
  | "dispense"
  | "alert"
  | "command"
  | "camera_unavailable";

export interface FeederEvent {
  seq: number;
  ts: number;
  kind: EventKind;
  payload: Record<string, any>;
}

/** [seconds_since_midnight, quantity] pairs, as the schedule endpoints speak. */
export type ScheduleEntry = [number, number];

export interface Schedule {
  entries: ScheduleEntry[];
  water_entries: ScheduleEntry[];
}

export interface ScheduleWithVersion extends Schedule {
  version: number;
}

export type Target = "food" | "water";

export type Connection = "live" | "reconnecting";
