"""
Command Line Steps

Steps file for avatar.feature

Commands run in process through click's test runner; "{tmp}" in a command
stands for the scenario's scratch directory.
"""
import os
import json
import shlex
from behave import given, when, then
from click.testing import CliRunner
from compare import expect, ensure
from avatar.cli import cli


@given('the "{name}" config')
def step_impl(context, name):
    """ Use one of the shipped configs """
    context.config_path = os.path.join(context.config_dir, name)


@when('I run "{command}"')
def step_impl(context, command):
    """ Invoke the command line with the current config """
    args = shlex.split(command.replace('{tmp}', context.workdir))
    context.result = CliRunner().invoke(cli, ['--config', context.config_path] + args)


@then('the exit code should be "{code:d}"')
def step_impl(context, code):
    expect(context.result.exit_code).to_equal(code)


@then('the output should have "{key}" equal to "{value}"')
def step_impl(context, key, value):
    """ Compare one field of the JSON the command printed """
    document = json.loads(context.result.output)
    ensure(key in document, True, 'no "%s" in %s' % (key, context.result.output))
    expect(json.dumps(document[key])).to_equal(value)


@then('the file "{name}" should exist')
def step_impl(context, name):
    path = os.path.join(context.workdir, name)
    ensure(os.path.exists(path), True, '%s was not written' % path)
