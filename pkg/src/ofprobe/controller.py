"""Controller process: accept switch connections, expose the task API.

Wires one event loop, one TCP listener for switches, one measurement
engine, and one HTTP server together.  The loop thread owns every piece
of mutable state; the HTTP server marshals requests onto it.
"""

import argparse
import logging
import signal

from .api import ApiApp, ApiHttpServer
from .config import ControllerConfig, load_config
from .engine import MeasurementEngine
from .eventloop import EventLoop
from .session import SwitchSession
from .transport import TcpListener

log = logging.getLogger(__name__)


class Controller:
    """Everything the service needs, bound to one loop."""

    def __init__(self, loop, config=None):
        self.loop = loop
        self.config = config or ControllerConfig()
        self.engine = MeasurementEngine(loop, self.config.probe)
        if self.config.router_id_serve:
            self.engine.set_router_config(True, self.config.router_identity)
        self.app = ApiApp(self.engine, self.config.policy)
        self.listener = TcpListener(
            loop, self.config.openflow_host, self.config.openflow_port,
            self._on_switch_connected)
        self.api_server = ApiHttpServer(
            self.app, loop, self.config.api_host, self.config.api_port)

    @property
    def openflow_port(self):
        return self.listener.port

    @property
    def api_port(self):
        return self.api_server.port

    def _on_switch_connected(self, conn, addr):
        log.info("switch connection from %s:%d", *addr[:2])
        session = SwitchSession(self.loop, conn)
        session.ready.add_done_callback(
            lambda fut: self._on_handshake_done(session, fut))

    def _on_handshake_done(self, session, fut):
        exc = fut.exception()
        if exc is not None:
            log.warning("switch handshake failed: %s", exc)
            return
        log.info("switch %#x connected", session.datapath_id)
        self.engine.attach_session(session)

    def start(self):
        self.api_server.start()
        log.info("listening for switches on %s:%d, api on %s:%d",
                 self.config.openflow_host, self.openflow_port,
                 self.config.api_host, self.api_port)

    def shutdown(self):
        self.api_server.stop()
        self.listener.close()
        if self.engine.session is not None:
            self.engine.session.close()


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ofprobe-controller",
        description="Measurement controller for OpenFlow switches.")
    parser.add_argument("--config", default=None,
                        help="INI file; see the config module docstring "
                             "for keys and defaults")
    parser.add_argument("--verbose", "-v", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    config = load_config(args.config) if args.config else ControllerConfig()
    loop = EventLoop(realtime=True)
    controller = Controller(loop, config)
    controller.start()

    signal.signal(signal.SIGTERM, lambda *a: loop.stop())
    try:
        loop.run_forever()
    except KeyboardInterrupt:
        pass
    finally:
        controller.shutdown()
        loop.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
